"""Variable clustering: K-means (Lloyd) and agglomerative hierarchical.

Each variable becomes one point: its standardized column read as a vector
over all rows.  For standardized columns the squared Euclidean distance is
``2 n (1 - r)``, so near points are positively correlated variables.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import VARIABLES, CityDailyPanel
from .errors import DegenerateColumnError, ShapeError
from .features import DesignMatrix
from .seeding import stream

LINKAGES = ("single", "complete", "average")


@dataclass(frozen=True, eq=False)
class VariablePointSet:
    names: tuple[str, ...]
    points: np.ndarray  # (variables, coordinates)

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) != len(self.names):
            raise ShapeError("one point per variable required")
        if len(set(self.names)) != len(self.names):
            raise ValueError("variable names must be unique")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.names)


def variable_points(data: CityDailyPanel | DesignMatrix, names: Sequence[str] | None = None) -> VariablePointSet:
    """Standardize each column (population sd) and transpose to points."""
    if isinstance(data, CityDailyPanel):
        all_names = list(VARIABLES)
        values = data.values.reshape(-1, len(VARIABLES))
        values = values[~np.isnan(values).any(axis=1)]
    else:
        all_names = list(data.columns)
        values = np.asarray(data.values, float)
    names = list(names) if names is not None else all_names
    cols = values[:, [all_names.index(n) for n in names]]
    sd = cols.std(axis=0)
    for n, s in zip(names, sd):
        if not s > 0:
            raise DegenerateColumnError(n)
    return VariablePointSet(tuple(names), ((cols - cols.mean(axis=0)) / sd).T)


@dataclass
class KMeansResult:
    k: int
    assignments: dict[str, int]
    centroids: np.ndarray
    inertia: float
    iterations: int
    seed: int
    inertia_trace: list[float] = field(default_factory=list)

    def clusters(self) -> list[list[str]]:
        groups: dict[int, list[str]] = {}
        for name, c in self.assignments.items():
            groups.setdefault(c, []).append(name)
        return [groups[c] for c in sorted(groups)]


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance."""
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels])


def kmeans(points: VariablePointSet, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with seeded uniform choice of initial centroids.

    Points are processed in name order so the outcome does not depend on
    input order.  An emptied cluster takes over the point farthest from its
    current centroid.
    """
    m = len(points)
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in 1..{m}, got {k}")
    order = sorted(range(m), key=lambda i: points.names[i])
    X = points.points[order]
    rng = stream(seed, "kmeans")
    centroids = X[np.sort(rng.choice(m, size=k, replace=False))].copy()

    labels = None
    trace = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d = _sq_dists(X, centroids)
        new = np.argmin(d, axis=1)
        for c in range(k):
            if not np.any(new == c):
                cost = d[np.arange(m), new]
                sizes = np.bincount(new, minlength=k)
                cost = np.where(sizes[new] > 1, cost, -np.inf)
                new[int(np.argmax(cost))] = c
        trace.append(float(d[np.arange(m), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(k)])

    final = _sq_dists(X, centroids)[np.arange(m), labels]
    inertia = float(final.sum())
    if inertia < trace[-1]:
        trace.append(inertia)
    canon = _canonical_labels(labels)
    by_name = {points.names[order[i]]: int(canon[i]) for i in range(m)}
    assignments = {n: by_name[n] for n in points.names}
    old_of_new = [int(labels[np.flatnonzero(canon == c)[0]]) for c in range(k)]
    return KMeansResult(k, assignments, centroids[old_of_new], inertia, iterations, seed, trace)


@dataclass
class Dendrogram:
    """Merge list in scipy convention: leaves are 0..n-1, merge i makes node n+i."""

    leaves: tuple[str, ...]
    merges: list[tuple[int, int, float]]
    linkage: str = "average"

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "node_a", "node_b", "height"))
            for step, (a, b, h) in enumerate(self.merges, start=1):
                w.writerow((step, a, b, repr(float(h))))
        return path


def distance_matrix(points: VariablePointSet) -> np.ndarray:
    X = points.points
    sq = (X ** 2).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def hierarchical(points: VariablePointSet, linkage: str = "average") -> Dendrogram:
    """Agglomerative clustering on Euclidean distances.

    Repeatedly merges the closest pair of active clusters (ties go to the
    lexicographically smallest pair of node ids) and updates distances by
    the Lance-Williams rule of the chosen linkage.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    n = len(points)
    if n < 2:
        raise ValueError("need at least two points")
    # exact pairwise differences; the Gram-matrix shortcut loses precision
    diff = points.points[:, None, :] - points.points[None, :, :]
    base = np.sqrt((diff ** 2).sum(axis=2))
    dist: dict[tuple[int, int], float] = {(i, j): float(base[i, j]) for i in range(n) for j in range(i + 1, n)}
    size = {i: 1 for i in range(n)}
    active = list(range(n))
    merges = []
    for step in range(n - 1):
        a, b = min(dist, key=lambda key: (dist[key], key))
        h = dist[(a, b)]
        new = n + step
        merges.append((a, b, h))
        for c in active:
            if c in (a, b):
                continue
            da = dist[(min(a, c), max(a, c))]
            db = dist[(min(b, c), max(b, c))]
            if linkage == "single":
                dn = min(da, db)
            elif linkage == "complete":
                dn = max(da, db)
            else:
                dn = (size[a] * da + size[b] * db) / (size[a] + size[b])
            dist[(c, new)] = dn
        active = [c for c in active if c not in (a, b)] + [new]
        size[new] = size.pop(a) + size.pop(b)
        dist = {key: v for key, v in dist.items() if a not in key and b not in key}
    return Dendrogram(points.names, merges, linkage)


def cut_dendrogram(d: Dendrogram, k: int) -> dict[str, int]:
    """Undo the ``k - 1`` highest merges; components become clusters.

    Cluster ids follow the order of each cluster's first leaf.
    """
    n = len(d.leaves)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in 1..{n}, got {k}")
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for step, (a, b, _) in enumerate(d.merges[: n - k]):
        parent[find(a)] = n + step
        parent[find(b)] = n + step
    roots = [find(i) for i in range(n)]
    labels = _canonical_labels(np.array(roots))
    return {name: int(lab) for name, lab in zip(d.leaves, labels)}


def write_assignments(assignments: dict[str, int], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("variable", "cluster"))
        for name, c in assignments.items():
            w.writerow((name, c))
    return path
