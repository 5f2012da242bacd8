"""Design matrices for the fixed-effects polynomial regression.

Each continuous base variable contributes raw-scale powers ``x``, ``x^2``,
``x^3`` (up to the requested degree); each power column is standardized
on its own afterwards.  Calendar dummies (day of week, day of month, month
of year) and fixed-effect dummies (city, year) drop their first level.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import POLLUTANTS, VAR_INDEX, CityDailyPanel, compute_hdd
from .errors import (
    ContractError,
    DegenerateColumnError,
    LeakageError,
    ShapeError,
    SpecError,
    SplitError,
)

log = logging.getLogger(__name__)

__all__ = [
    "FeatureSpec",
    "DesignMatrix",
    "Standardizer",
    "SplitIndex",
    "compute_hdd",
    "build_design",
    "response",
    "fit_standardizer",
    "apply_standardizer",
    "invert_standardizer",
    "chronological_split",
]

CONTINUOUS = "continuous"
DUMMY = "dummy"


@dataclass(frozen=True)
class FeatureSpec:
    base_variables: tuple[str, ...]
    degree: int = 1
    include_time_dummies: bool = False
    fixed_effect_keys: tuple[str, ...] = ()
    target: str = "PM25"

    def __post_init__(self):
        object.__setattr__(self, "base_variables", tuple(self.base_variables))
        object.__setattr__(self, "fixed_effect_keys", tuple(self.fixed_effect_keys))
        if self.degree not in (1, 2, 3):
            raise SpecError(f"degree must be 1, 2 or 3, got {self.degree}")
        if self.target not in POLLUTANTS:
            raise SpecError(f"target must be one of {POLLUTANTS}")
        for v in self.base_variables:
            if v not in VAR_INDEX:
                raise SpecError(f"unknown base variable {v!r}")
        if self.target in self.base_variables:
            raise SpecError("target cannot also be a regressor")
        bad = set(self.fixed_effect_keys) - {"city", "year"}
        if bad:
            raise SpecError(f"unknown fixed-effect keys {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    cities: tuple[str, ...]  # per row
    dates: tuple[dt.date, ...]  # per row
    columns: tuple[str, ...]
    values: np.ndarray
    column_kind: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (len(self.cities), len(self.columns)):
            raise ShapeError(f"values {values.shape} vs {len(self.cities)} rows x {len(self.columns)} columns")
        if np.isnan(values).any():
            raise ContractError("design matrix contains missing entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n_rows(self) -> int:
        return len(self.cities)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def continuous_columns(self) -> list[str]:
        return [c for c, k in zip(self.columns, self.column_kind) if k == CONTINUOUS]

    def take_columns(self, names: Sequence[str]) -> "DesignMatrix":
        idx = [self.columns.index(n) for n in names]
        return DesignMatrix(
            self.cities, self.dates, tuple(names), self.values[:, idx], tuple(self.column_kind[i] for i in idx)
        )

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("city", "date") + self.columns)
            for city, day, row in zip(self.cities, self.dates, self.values):
                w.writerow([city, day.isoformat()] + [repr(float(v)) for v in row])
        return path


def _power_name(var: str, k: int) -> str:
    return var if k == 1 else f"{var}^{k}"


def _one_hot(levels: Sequence, prefix: str, universe: Sequence) -> tuple[list[str], np.ndarray]:
    """Dummy columns for every level of ``universe`` except the first."""
    levels = np.asarray(levels)
    names, cols = [], []
    for level in list(universe)[1:]:
        names.append(f"{prefix}_{level}")
        cols.append((levels == level).astype(float))
    return names, np.column_stack(cols) if cols else np.empty((len(levels), 0))


def build_design(panel: CityDailyPanel, spec: FeatureSpec) -> DesignMatrix:
    """Rows are (city, date) in city-major order; columns per ``spec``."""
    if panel.missing_mask().any():
        raise ContractError("build_design needs a fully imputed panel")
    n_c, n_d = len(panel.cities), panel.n_days
    dates = panel.dates()
    row_cities = tuple(c for c in panel.cities for _ in range(n_d))
    row_dates = tuple(dates) * n_c

    names: list[str] = []
    kinds: list[str] = []
    blocks: list[np.ndarray] = []
    for var in spec.base_variables:
        raw = panel.variable(var).reshape(-1)
        for k in range(1, spec.degree + 1):
            names.append(_power_name(var, k))
            kinds.append(CONTINUOUS)
            blocks.append((raw ** k)[:, None])

    def add_dummies(prefix, levels, universe, drop_empty=False):
        dnames, cols = _one_hot(levels, prefix, universe)
        for j, name in enumerate(dnames):
            if drop_empty and not cols[:, j].any():
                log.warning("dropping all-zero dummy column %s", name)
                continue
            names.append(name)
            kinds.append(DUMMY)
            blocks.append(cols[:, j : j + 1])

    if spec.include_time_dummies:
        add_dummies("DW", [d.isoweekday() for d in row_dates], range(1, 8), drop_empty=True)
        add_dummies("DM", [d.day for d in row_dates], range(1, 32), drop_empty=True)
        add_dummies("MY", [d.month for d in row_dates], range(1, 13), drop_empty=True)
    if "city" in spec.fixed_effect_keys:
        add_dummies("city", row_cities, panel.cities)
    if "year" in spec.fixed_effect_keys:
        years = [d.year for d in row_dates]
        add_dummies("year", years, sorted(set(years)))

    values = np.hstack(blocks) if blocks else np.empty((len(row_cities), 0))
    return DesignMatrix(row_cities, row_dates, tuple(names), values, tuple(kinds))


def response(panel: CityDailyPanel, target: str) -> np.ndarray:
    """Target pollutant in the row order of :func:`build_design`."""
    return np.asarray(panel.variable(target)).reshape(-1)


@dataclass(frozen=True, eq=False)
class Standardizer:
    columns: tuple[str, ...]
    mean: np.ndarray
    sd: np.ndarray

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, float) - self.mean) / self.sd

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, float) * self.sd + self.mean

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "sd": self.sd.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Standardizer":
        return cls(tuple(d["columns"]), np.asarray(d["mean"], float), np.asarray(d["sd"], float))

    def matches(self, other: "Standardizer") -> bool:
        return (
            self.columns == other.columns
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.sd, other.sd)
        )


def fit_column_stats(values: np.ndarray, columns: Sequence[str]) -> Standardizer:
    values = np.asarray(values, float)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) < 2:
        raise SplitError("standardizer needs at least two rows")
    mean = values.mean(axis=0)
    sd = values.std(axis=0)
    for name, s in zip(columns, sd):
        if not s > 0:
            raise DegenerateColumnError(name)
    return Standardizer(tuple(columns), mean, sd)


def fit_standardizer(matrix: DesignMatrix, rows: Sequence[int] | None = None) -> Standardizer:
    """Mean and population sd of continuous columns over ``rows`` (all rows if None)."""
    cont = matrix.continuous_columns()
    idx = [matrix.columns.index(c) for c in cont]
    rows = np.arange(matrix.n_rows) if rows is None else np.asarray(rows, int)
    return fit_column_stats(matrix.values[np.ix_(rows, idx)], cont)


def _continuous_index(std: Standardizer, matrix: DesignMatrix) -> list[int]:
    if tuple(matrix.continuous_columns()) != std.columns:
        raise ShapeError(
            f"matrix continuous columns {matrix.continuous_columns()} do not match standardizer {list(std.columns)}"
        )
    return [matrix.columns.index(c) for c in std.columns]


def apply_standardizer(std: Standardizer, matrix: DesignMatrix) -> DesignMatrix:
    idx = _continuous_index(std, matrix)
    values = np.array(matrix.values)
    values[:, idx] = std.transform(values[:, idx])
    return replace(matrix, values=values)


def invert_standardizer(std: Standardizer, matrix: DesignMatrix) -> DesignMatrix:
    idx = _continuous_index(std, matrix)
    values = np.array(matrix.values)
    values[:, idx] = std.inverse(values[:, idx])
    return replace(matrix, values=values)


@dataclass(frozen=True)
class SplitIndex:
    train: np.ndarray
    test: np.ndarray
    # per-city (offset, n_rows, n_train) in concatenated row space
    layout: tuple[tuple[int, int, int], ...] = field(default=())

    def city_train_count(self, city_pos: int) -> int:
        return self.layout[city_pos][2]


def chronological_split(
    panel_rows: Mapping[str, int] | Sequence[int],
    fraction: float = 0.8,
    dates: Mapping[str, Sequence] | Sequence[Sequence] | None = None,
) -> SplitIndex:
    """Per city, the first ``floor(fraction * n)`` rows train and the rest test.

    Rows are numbered city-major, as in :func:`build_design`.  When ``dates``
    are supplied they must be strictly increasing within each city, otherwise
    row order would not be time order and :class:`LeakageError` is raised.
    """
    if not 0 < fraction < 1:
        raise SplitError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    if isinstance(panel_rows, Mapping):
        keys = list(panel_rows)
        counts = [int(panel_rows[k]) for k in keys]
    else:
        counts = [int(n) for n in panel_rows]
        keys = list(range(len(counts)))
    if dates is not None:
        date_seqs = [dates[k] for k in keys] if isinstance(dates, Mapping) else list(dates)
        for key, n, seq in zip(keys, counts, date_seqs):
            arr = np.asarray(seq, dtype="datetime64[D]")
            if len(arr) != n:
                raise SplitError(f"city {key}: {len(arr)} dates for {n} rows")
            if n > 1 and not np.all(np.diff(arr).astype(int) > 0):
                raise LeakageError(f"city {key}: dates are not strictly increasing")
    train, test, layout = [], [], []
    offset = 0
    for key, n in zip(keys, counts):
        if n < 2:
            raise SplitError(f"city {key} has {n} rows; need at least 2")
        n_train = int(np.floor(fraction * n + 1e-9))
        if n_train < 1 or n_train >= n:
            raise SplitError(f"city {key}: fraction {fraction} leaves an empty train or test part")
        train.extend(range(offset, offset + n_train))
        test.extend(range(offset + n_train, offset + n))
        layout.append((offset, n, n_train))
        offset += n
    return SplitIndex(np.asarray(train, int), np.asarray(test, int), tuple(layout))
