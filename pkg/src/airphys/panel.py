"""Fixed-effects polynomial panel regression and significance ranking."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .dataset import VARIABLES, CityDailyPanel
from .errors import CollinearityError, DegenerateColumnError, ShapeError
from .features import DUMMY, DesignMatrix

log = logging.getLogger(__name__)

FE_PREFIXES = ("city_", "year_")
INTERCEPT = "const"


@dataclass
class PanelModelFit:
    coefficients: dict[str, float]
    standard_errors: dict[str, float]
    t_stats: dict[str, float]
    fixed_effects: dict[str, float]
    r_squared: float
    residuals: np.ndarray
    n: int
    p: int
    kinds: dict[str, str]

    def features(self, include_dummies: bool = False) -> list[str]:
        """Regressor names eligible for ranking (no intercept, no fixed effects)."""
        return [
            f
            for f in self.coefficients
            if f != INTERCEPT and (include_dummies or self.kinds.get(f) != DUMMY)
        ]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("feature", "coefficient", "std_error", "t_stat"))
            for name in list(self.coefficients) + list(self.fixed_effects):
                coef = self.coefficients.get(name, self.fixed_effects.get(name))
                w.writerow((name, repr(coef), repr(self.standard_errors[name]), repr(self.t_stats[name])))
        return path


def _is_fixed_effect(name: str, fe_keys: Sequence[str]) -> bool:
    return any(name.startswith(f"{k}_") for k in fe_keys)


def fit_panel_ols(
    design: DesignMatrix,
    response: np.ndarray,
    fe_keys: Sequence[str] = ("city", "year"),
    add_intercept: bool = True,
) -> PanelModelFit:
    """Least squares with homoskedastic standard errors.

    Fixed effects are the dummy columns whose names start with one of
    ``fe_keys`` (e.g. ``city_Bergen``); their estimates land in
    ``fixed_effects`` rather than ``coefficients``.  The system is solved
    by column-pivoted QR, which also identifies dependent columns when
    the design is rank deficient.
    """
    y = np.asarray(response, float)
    if y.shape != (design.n_rows,):
        raise ShapeError(f"response length {y.shape} does not match {design.n_rows} rows")
    names = list(design.columns)
    kinds = dict(zip(design.columns, design.column_kind))
    X = np.asarray(design.values, float)

    keep = [j for j, name in enumerate(names) if kinds[name] != DUMMY or X[:, j].any()]
    for j in set(range(len(names))) - set(keep):
        warnings.warn(f"dropping all-zero dummy column {names[j]}")
    names = [names[j] for j in keep]
    X = X[:, keep]
    if add_intercept:
        names = [INTERCEPT] + names
        X = np.column_stack([np.ones(len(y)), X])
        kinds[INTERCEPT] = "intercept"
    n, p = X.shape
    if p >= n:
        raise CollinearityError(names[n - 1:] if n else names)

    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(n, p) * np.finfo(float).eps * 1e3 if p else 0.0
    rank = int(np.sum(diag > tol))
    if rank < p:
        raise CollinearityError([names[j] for j in piv[rank:]])

    qty = Q.T @ y
    beta_piv = linalg.solve_triangular(R, qty)
    beta = np.empty(p)
    beta[piv] = beta_piv
    resid = y - X @ beta
    rss = float(resid @ resid)
    sigma2 = rss / (n - p)
    r_inv = linalg.solve_triangular(R, np.eye(p))
    cov_piv = r_inv @ r_inv.T
    var = np.empty(p)
    var[piv] = np.diag(cov_piv)
    se = np.sqrt(sigma2 * var)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, beta / np.where(se > 0, se, 1.0), np.sign(beta) * np.inf)

    centered = y - y.mean() if add_intercept else y
    tss = float(centered @ centered)
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    r2 = min(max(r2, 0.0), 1.0)

    coefs, fes = {}, {}
    for name, b in zip(names, beta):
        (fes if _is_fixed_effect(name, fe_keys) else coefs)[name] = float(b)
    return PanelModelFit(
        coefficients=coefs,
        standard_errors={nm: float(s) for nm, s in zip(names, se)},
        t_stats={nm: float(v) for nm, v in zip(names, t)},
        fixed_effects=fes,
        r_squared=r2,
        residuals=resid,
        n=n,
        p=p,
        kinds=kinds,
    )


def rank_features_by_significance(fit: PanelModelFit, k: int | None = None, include_dummies: bool = False) -> list[str]:
    """Regressors by descending |t|; equal |t| ordered by name."""
    feats = fit.features(include_dummies)
    ordered = sorted(feats, key=lambda f: (-abs(fit.t_stats[f]), f))
    if k is None:
        return ordered
    if k > len(ordered):
        warnings.warn(f"k={k} exceeds the {len(ordered)} available features; truncating")
    return ordered[:k]


@dataclass
class CorrelationMatrix:
    names: tuple[str, ...]
    matrix: np.ndarray

    def __getitem__(self, pair: tuple[str, str]) -> float:
        a, b = pair
        return float(self.matrix[self.names.index(a), self.names.index(b)])

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("",) + self.names)
            for name, row in zip(self.names, self.matrix):
                w.writerow([name] + [repr(float(v)) for v in row])
        return path


def _columns_of(data) -> tuple[list[str], np.ndarray]:
    if isinstance(data, CityDailyPanel):
        values = data.values.reshape(-1, len(VARIABLES))
        values = values[~np.isnan(values).any(axis=1)]
        return list(VARIABLES), values
    if isinstance(data, DesignMatrix):
        return list(data.columns), np.asarray(data.values, float)
    if isinstance(data, Mapping):
        names = list(data)
        return names, np.column_stack([np.asarray(data[n], float) for n in names])
    raise TypeError(f"cannot correlate {type(data).__name__}")


def correlation_matrix(data, variables: Sequence[str] | None = None) -> CorrelationMatrix:
    """Pairwise Pearson correlations of panel variables or design columns."""
    names, values = _columns_of(data)
    if variables is not None:
        idx = [names.index(v) for v in variables]
        names, values = [names[i] for i in idx], values[:, idx]
    if len(values) < 2:
        raise ShapeError("correlation needs at least two rows")
    centered = values - values.mean(axis=0)
    norms = np.sqrt((centered ** 2).sum(axis=0))
    for name, nrm in zip(names, norms):
        if not nrm > 0:
            raise DegenerateColumnError(name)
    z = centered / norms
    corr = np.clip(z.T @ z, -1.0, 1.0)
    corr = (corr + corr.T) / 2
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(tuple(names), corr)
