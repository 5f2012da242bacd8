import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.csgraph import minimum_spanning_tree

from airphys.cluster import (
    LINKAGES,
    VariablePointSet,
    cut_dendrogram,
    hierarchical,
    kmeans,
    variable_points,
    write_assignments,
)
from airphys.dataset import SyntheticConfig, generate_synthetic


def line(*xs, names=None):
    return VariablePointSet(tuple(names or (f"p{i}" for i in range(len(xs)))), np.asarray(xs, float)[:, None])


def _partition(assign):
    groups = {}
    for name, c in assign.items():
        groups.setdefault(c, set()).add(name)
    return {frozenset(g) for g in groups.values()}


def _brute_force_best(points, k):
    names, X = points.names, points.points
    best = (np.inf, None)
    for labels in itertools.product(range(k), repeat=len(names)):
        if len(set(labels)) != k:
            continue
        lab = np.array(labels)
        cost = sum(((X[lab == c] - X[lab == c].mean(axis=0)) ** 2).sum() for c in range(k))
        best = min(best, (cost, labels), key=lambda t: t[0])
    cost, labels = best
    return cost, _partition(dict(zip(names, labels)))


# ---------------------------------------------------------------- k-means


def test_kmeans_line_fixture():
    pts = line(0, 1, 10, 11)
    res = kmeans(pts, 2, seed=0)
    assert _partition(res.assignments) == {frozenset({"p0", "p1"}), frozenset({"p2", "p3"})}
    assert res.inertia == 1.0
    assert res.inertia == _brute_force_best(pts, 2)[0]


@pytest.mark.parametrize("seed", range(10))
def test_kmeans_line_fixture_every_seed(seed):
    assert kmeans(line(0, 1, 10, 11), 2, seed=seed).inertia == 1.0


def test_kmeans_k_equals_points():
    res = kmeans(line(3, 1, 4, 1.5, 9), 5, seed=2)
    assert len(set(res.assignments.values())) == 5
    assert res.inertia == 0.0


def test_kmeans_separated_groups():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, size=(5, 3))
    b = rng.normal(50, 0.1, size=(6, 3))
    names = [f"a{i}" for i in range(5)] + [f"b{i}" for i in range(6)]
    res = kmeans(VariablePointSet(tuple(names), np.vstack([a, b])), 2, seed=3)
    assert _partition(res.assignments) == {frozenset(names[:5]), frozenset(names[5:])}


@pytest.mark.parametrize("k", [0, 5])
def test_kmeans_bad_k(k):
    with pytest.raises(ValueError):
        kmeans(line(0, 1, 2, 3), k)


def test_kmeans_repairs_empty_cluster():
    # duplicated points make an initial centroid pair coincide
    pts = line(0, 0, 0, 5, 5, names=list("abcde"))
    for seed in range(20):
        res = kmeans(pts, 3, seed=seed)
        assert len(set(res.assignments.values())) == 3


points_strategy = st.integers(3, 8).flatmap(
    lambda m: st.tuples(st.just(m), st.integers(1, m), st.integers(0, 10_000))
)


@given(points_strategy)
def test_kmeans_inertia_non_increasing(args):
    m, k, seed = args
    pts = VariablePointSet(tuple(f"v{i}" for i in range(m)), np.random.default_rng(seed).normal(size=(m, 3)))
    res = kmeans(pts, k, seed=seed)
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia_trace, res.inertia_trace[1:]))
    assert len(set(res.assignments.values())) == k


@given(points_strategy, st.randoms())
def test_kmeans_order_invariant_and_deterministic(args, rnd):
    m, k, seed = args
    X = np.random.default_rng(seed).normal(size=(m, 2))
    names = [f"v{i}" for i in range(m)]
    order = list(range(m))
    rnd.shuffle(order)
    a = kmeans(VariablePointSet(tuple(names), X), k, seed=seed)
    b = kmeans(VariablePointSet(tuple(names[i] for i in order), X[order]), k, seed=seed)
    assert _partition(a.assignments) == _partition(b.assignments)
    assert a.inertia == pytest.approx(b.inertia)
    assert kmeans(VariablePointSet(tuple(names), X), k, seed=seed).assignments == a.assignments


# ---------------------------------------------------------------- hierarchical


def test_two_points_single_merge():
    d = hierarchical(line(0, 3))
    assert d.merges == [(0, 1, 3.0)]


def test_three_point_single_linkage():
    d = hierarchical(line(0, 1, 10), "single")
    assert d.merges == [(0, 1, 1.0), (2, 3, 9.0)]


def test_four_point_complete_vs_single():
    # pairwise distances on 0, 2, 5, 9:
    #       0  2  5  9
    #   0   .  2  5  9
    #   2      .  3  7
    #   5         .  4
    single = hierarchical(line(0, 2, 5, 9), "single")
    complete = hierarchical(line(0, 2, 5, 9), "complete")
    average = hierarchical(line(0, 2, 5, 9), "average")
    assert single.merges == [(0, 1, 2.0), (2, 4, 3.0), (3, 5, 4.0)]
    assert complete.merges == [(0, 1, 2.0), (2, 3, 4.0), (4, 5, 9.0)]
    # average: {0,2} to 5 is 4 and to 9 is 8; 5-9 is 4, tie goes to the smaller pair (2, 3)
    assert average.merges == [(0, 1, 2.0), (2, 3, 4.0), (4, 5, 6.0)]


def test_hierarchical_needs_two_points():
    with pytest.raises(ValueError):
        hierarchical(line(1.0))


@given(st.integers(2, 9), st.integers(0, 10_000), st.sampled_from(LINKAGES))
def test_dendrogram_shape_and_monotone(m, seed, linkage):
    pts = VariablePointSet(tuple(f"v{i}" for i in range(m)), np.random.default_rng(seed).normal(size=(m, 2)))
    d = hierarchical(pts, linkage)
    heights = [h for _, _, h in d.merges]
    assert len(d.merges) == m - 1
    assert all(b >= a - 1e-12 for a, b in zip(heights, heights[1:]))


@given(st.integers(2, 9), st.integers(0, 10_000))
def test_single_linkage_equals_mst(m, seed):
    X = np.random.default_rng(seed).normal(size=(m, 3))
    d = hierarchical(VariablePointSet(tuple(f"v{i}" for i in range(m)), X), "single")
    dist = np.sqrt(((X[:, None] - X[None]) ** 2).sum(axis=2))
    mst = minimum_spanning_tree(dist).toarray()
    assert np.allclose(sorted(h for _, _, h in d.merges), np.sort(mst[mst > 0]))


# ---------------------------------------------------------------- cut


def test_cut_extremes():
    d = hierarchical(line(0, 1, 10, 30))
    assert len(set(cut_dendrogram(d, 1).values())) == 1
    assert len(set(cut_dendrogram(d, 4).values())) == 4


def test_cut_three_point_fixture():
    d = hierarchical(line(0, 1, 10, names=["a", "b", "c"]), "single")
    assert _partition(cut_dendrogram(d, 2)) == {frozenset("ab"), frozenset("c")}


@pytest.mark.parametrize("k", [0, 4])
def test_cut_out_of_range(k):
    with pytest.raises(ValueError):
        cut_dendrogram(hierarchical(line(0, 1, 2)), k)


# ---------------------------------------------------------------- variable clusters


DRIVERS = ("HDD", "meanRH", "SD", "TV")
SEPARATE = ("VP", "PP", "WG", "Tmean")


@pytest.fixture(scope="module")
def synthetic_points():
    return variable_points(generate_synthetic(SyntheticConfig(seed=0)))


def _pollutants_with_drivers(assign):
    home = assign["PM25"]
    return (
        assign["NOx"] == home
        and all(assign[v] == home for v in DRIVERS)
        and all(assign[v] != home for v in SEPARATE)
    )


@pytest.mark.parametrize("linkage", LINKAGES)
@pytest.mark.parametrize("k", [2, 3, 4])
def test_dendrogram_cut_groups_pollutants_with_drivers(synthetic_points, linkage, k):
    assert _pollutants_with_drivers(cut_dendrogram(hierarchical(synthetic_points, linkage), k))


@pytest.mark.parametrize("seed", range(3))
def test_kmeans_two_clusters_groups_pollutants_with_drivers(synthetic_points, seed):
    assert _pollutants_with_drivers(kmeans(synthetic_points, 2, seed=seed).assignments)


def test_exports(tmp_path):
    d = hierarchical(line(0, 1, 10), "single")
    assert d.to_csv(tmp_path / "d.csv").read_text().splitlines() == [
        "step,node_a,node_b,height", "1,0,1,1.0", "2,2,3,9.0"
    ]
    text = write_assignments({"a": 0, "b": 1}, tmp_path / "a.csv").read_text()
    assert text == "variable,cluster\na,0\nb,1\n"
