"""Random-forest regression with out-of-bag permutation importance (%IncMSE)."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateTargetError, ShapeError
from .features import DesignMatrix
from .parallel import ordered_map
from .seeding import derive_seed, stream


@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Array-encoded CART tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    min_leaf: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.intp)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active[r] = self.feature[node[r]] >= 0
        return self.value[node]


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Largest SSE reduction over midpoints of sorted unique values.

    Returns (score, threshold) where score is ``S_L^2/n_L + S_R^2/n_R``
    (maximizing it minimizes the children's SSE), or None.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(ys)
    csum = np.cumsum(ys)
    total = csum[-1]
    n_left = np.arange(min_leaf, n - min_leaf + 1)
    valid = xs[n_left - 1] < xs[n_left]
    if not valid.any():
        return None
    n_left = n_left[valid]
    s_left = csum[n_left - 1]
    score = s_left ** 2 / n_left + (total - s_left) ** 2 / (n - n_left)
    best = int(np.argmax(score))
    i = n_left[best]
    return float(score[best]), 0.5 * (xs[i - 1] + xs[i])


def grow_tree(X: np.ndarray, y: np.ndarray, mtry: int, min_leaf: int, rng: np.random.Generator) -> RegressionTree:
    p = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[rows].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)))]
    while stack:
        node, rows = stack.pop()
        yn = y[rows]
        if len(rows) < 2 * min_leaf or np.all(yn == yn[0]):
            continue
        base = yn.sum() ** 2 / len(yn)
        best = None
        for f in np.sort(rng.choice(p, size=mtry, replace=False)):
            found = _best_split(X[rows, f], yn, min_leaf)
            if found is not None and found[0] > base and (best is None or found[0] > best[0]):
                best = (found[0], int(f), found[1])
        if best is None:
            continue
        _, f, thr = best
        go_left = X[rows, f] <= thr
        lrows, rrows = rows[go_left], rows[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        stack.append((right[node], rrows))
        stack.append((left[node], lrows))
    return RegressionTree(
        np.asarray(feature, np.intp),
        np.asarray(threshold, float),
        np.asarray(left, np.intp),
        np.asarray(right, np.intp),
        np.asarray(value, float),
        min_leaf,
    )


@dataclass(frozen=True, eq=False)
class Forest:
    trees: list[RegressionTree]
    bootstrap: list[np.ndarray]
    oob: np.ndarray  # (trees, rows) bool
    mtry: int
    seed: int
    feature_names: tuple[str, ...] = field(default=())

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        return np.stack([t.predict(X) for t in self.trees])


def _as_matrix(X) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(X, DesignMatrix):
        return np.asarray(X.values, float), X.columns
    X = np.asarray(X, float)
    if X.ndim != 2:
        raise ShapeError("feature matrix must be two-dimensional")
    return X, tuple(f"x{j + 1}" for j in range(X.shape[1]))


def fit_forest(
    X: DesignMatrix | np.ndarray,
    y: Sequence[float],
    trees: int = 500,
    mtry: int | None = None,
    min_leaf: int = 5,
    seed: int = 0,
    feature_names: Sequence[str] | None = None,
) -> Forest:
    """Bagged CART regression trees.

    Tree ``i`` draws its bootstrap sample and per-node feature subsets
    from its own seed stream, so trees can be grown in any order.
    """
    Xa, names = _as_matrix(X)
    if feature_names is not None:
        if len(feature_names) != Xa.shape[1]:
            raise ShapeError(f"{len(feature_names)} names for {Xa.shape[1]} features")
        names = tuple(feature_names)
    y = np.asarray(y, float)
    n, p = Xa.shape
    if len(y) != n:
        raise ShapeError(f"{len(y)} targets for {n} rows")
    if n < 10:
        raise ShapeError("need at least 10 rows")
    if np.all(y == y[0]):
        raise DegenerateTargetError("target is constant")
    mtry = max(1, math.ceil(p / 3)) if mtry is None else mtry
    if not 1 <= mtry <= p:
        raise ValueError(f"mtry must lie in 1..{p}")
    if trees < 1:
        raise ValueError("need at least one tree")

    def grow(i):
        rng = stream(derive_seed(seed, "forest"), "tree", i)
        boot = rng.integers(0, n, size=n)
        return boot, grow_tree(Xa[boot], y[boot], mtry, min_leaf, rng)

    grown = ordered_map(grow, range(trees))
    oob = np.ones((trees, n), bool)
    for i, (boot, _) in enumerate(grown):
        oob[i, boot] = False
    return Forest([t for _, t in grown], [b for b, _ in grown], oob, mtry, seed, names)


def predict_forest(forest: Forest, x) -> np.ndarray | float:
    """Mean of per-tree predictions for one feature vector or a matrix of rows."""
    xa = np.asarray(x.values if isinstance(x, DesignMatrix) else x, float)
    single = xa.ndim == 1
    xa = np.atleast_2d(xa)
    if xa.shape[1] != forest.n_features:
        raise ShapeError(f"expected {forest.n_features} features, got {xa.shape[1]}")
    pred = forest.tree_predictions(xa).mean(axis=0)
    return float(pred[0]) if single else pred


@dataclass
class ImportanceReport:
    pct_inc_mse: dict[str, float]
    rank: dict[str, int]
    baseline_mse: float
    rows_used: int

    def ordered(self) -> list[str]:
        return sorted(self.rank, key=self.rank.get)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("feature", "pct_inc_mse", "rank"))
            for name in self.ordered():
                w.writerow((name, repr(self.pct_inc_mse[name]), self.rank[name]))
        return path


def _oob_mse(per_tree: np.ndarray, oob: np.ndarray, y: np.ndarray, rows: np.ndarray) -> float:
    counts = oob[:, rows].sum(axis=0)
    pred = (per_tree[:, rows] * oob[:, rows]).sum(axis=0) / counts
    return float(np.mean((pred - y[rows]) ** 2))


def oob_permutation_importance(
    forest: Forest, X, y: Sequence[float], repeats: int = 1, seed: int = 0
) -> ImportanceReport:
    """%IncMSE_j = 100 (MSE_oob(column j permuted) - MSE_oob) / MSE_oob.

    A row contributes only through trees that did not see it in their
    bootstrap; rows out-of-bag for no tree are dropped with a warning.
    Column ``j`` is permuted across rows, ``repeats`` times, and only
    trees that split on ``j`` are re-evaluated, so a feature that is never
    used scores exactly 0.
    """
    Xa, _ = _as_matrix(X)
    y = np.asarray(y, float)
    names = forest.feature_names
    if Xa.shape[1] != len(names):
        raise ShapeError(f"expected {len(names)} features, got {Xa.shape[1]}")
    covered = forest.oob.any(axis=0)
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} rows are out-of-bag for no tree; excluded")
    rows = np.flatnonzero(covered)
    base_pred = forest.tree_predictions(Xa)
    base = _oob_mse(base_pred, forest.oob, y, rows)

    pct = {}
    for j, name in enumerate(names):
        users = [i for i, t in enumerate(forest.trees) if j in t.used_features()]
        if not users:
            pct[name] = 0.0
            continue
        rng = stream(seed, "importance", j)
        incs = []
        for _ in range(repeats):
            Xp = Xa.copy()
            Xp[:, j] = Xa[rng.permutation(len(Xa)), j]
            pred = base_pred.copy()
            for i in users:
                pred[i] = forest.trees[i].predict(Xp)
            incs.append(100.0 * (_oob_mse(pred, forest.oob, y, rows) - base) / base)
        pct[name] = float(np.mean(incs))
    order = sorted(names, key=lambda n: (-pct[n], names.index(n)))
    return ImportanceReport(pct, {n: r + 1 for r, n in enumerate(order)}, base, len(rows))
