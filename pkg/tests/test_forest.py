import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from airphys.dataset import SyntheticConfig, generate_synthetic
from airphys.errors import DegenerateTargetError, ShapeError
from airphys.forest import (
    Forest,
    RegressionTree,
    _best_split,
    fit_forest,
    oob_permutation_importance,
    predict_forest,
)

from oracles import PANEL_BASE, forest_oracle_data


def leaf(value):
    return RegressionTree(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([value]), 5)


def _forest(trees, p=2):
    n = 10
    return Forest(trees, [np.arange(n)] * len(trees), np.zeros((len(trees), n), bool), 1, 0,
                  tuple(f"x{j + 1}" for j in range(p)))


def _mse(a, b):
    return float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))


# ---------------------------------------------------------------- fitting


def test_constant_target():
    with pytest.raises(DegenerateTargetError):
        fit_forest(np.random.default_rng(0).normal(size=(20, 2)), np.full(20, 3.0), trees=2)


def test_too_few_rows():
    with pytest.raises(ShapeError):
        fit_forest(np.arange(9.0)[:, None], np.arange(9.0), trees=2)


@pytest.mark.parametrize("columns, mtry", [(1, None), (3, 3)])
def test_step_function_fits(columns, mtry):
    rng = np.random.default_rng(1)
    X = rng.uniform(-1, 1, size=(300, columns))
    y = np.where(X[:, 0] > 0.2, 5.0, -1.0)
    f = fit_forest(X, y, trees=50, seed=2, mtry=mtry)
    assert _mse(predict_forest(f, X), y) < 0.01 * y.var()


def test_bit_identical_for_fixed_seed():
    X, y = forest_oracle_data(0, n=200)
    a, b = fit_forest(X, y, trees=10, seed=9), fit_forest(X, y, trees=10, seed=9)
    for ta, tb in zip(a.trees, b.trees):
        for field in ("feature", "threshold", "left", "right", "value"):
            assert np.array_equal(getattr(ta, field), getattr(tb, field))
    assert np.array_equal(a.oob, b.oob)


def test_defaults_and_mtry_bounds():
    X, y = forest_oracle_data(0, n=50)
    assert fit_forest(X, y, trees=1).mtry == 2
    with pytest.raises(ValueError):
        fit_forest(X, y, trees=1, mtry=6)


def test_worker_count_does_not_change_forest(monkeypatch):
    X, y = forest_oracle_data(3, n=150)
    single = fit_forest(X, y, trees=6, seed=4)
    monkeypatch.setenv("AIRPHYS_THREADS", "3")
    pooled = fit_forest(X, y, trees=6, seed=4)
    assert all(np.array_equal(a.threshold, b.threshold) for a, b in zip(single.trees, pooled.trees))


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_tree_structure(seed, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 3))
    y = X[:, 0] + rng.normal(size=60)
    f = fit_forest(X, y, trees=2, min_leaf=min_leaf, seed=seed)
    for tree, boot in zip(f.trees, f.bootstrap):
        internal = tree.feature >= 0
        assert np.all(tree.left[internal] > 0) and np.all(tree.right[internal] > 0)
        assert np.all(tree.left[~internal] == -1)
        # each leaf predicts the mean of the bootstrap targets routed to it
        Xb, yb = X[boot], y[boot]
        node = np.zeros(len(Xb), int)
        for _ in range(tree.n_nodes):
            move = tree.feature[node] >= 0
            if not move.any():
                break
            nd = node[move]
            left = Xb[move, tree.feature[nd]] <= tree.threshold[nd]
            node[move] = np.where(left, tree.left[nd], tree.right[nd])
        for leaf_id in np.unique(node):
            members = yb[node == leaf_id]
            assert len(members) >= min_leaf
            assert tree.value[leaf_id] == pytest.approx(members.mean())


def test_oob_mask_complements_bootstrap():
    X, y = forest_oracle_data(1, n=100)
    f = fit_forest(X, y, trees=5, seed=0)
    for i, boot in enumerate(f.bootstrap):
        expected = np.ones(100, bool)
        expected[boot] = False
        assert np.array_equal(f.oob[i], expected)


def test_split_tie_prefers_lower_threshold():
    # both cut points separate equally well: score ties, the first wins
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.0, 1.0, 1.0, 2.0])
    score, thr = _best_split(x, y, 1)
    assert thr == 0.5


def test_split_tie_prefers_lower_feature():
    x = np.arange(20.0)
    X = np.column_stack([x, x])
    f = fit_forest(X, (x > 9).astype(float), trees=3, mtry=2, seed=0)
    assert all(t.used_features() == {0} for t in f.trees)


# ---------------------------------------------------------------- prediction


def test_predict_single_leaf_trees():
    assert predict_forest(_forest([leaf(5.0)] * 3), [0.3, 0.1]) == 5.0


def test_predict_mean_of_trees():
    assert predict_forest(_forest([leaf(2.0), leaf(4.0)]), [0.0, 0.0]) == 3.0


def test_predict_dimension_mismatch():
    with pytest.raises(ShapeError):
        predict_forest(_forest([leaf(1.0)]), [1.0, 2.0, 3.0])


def test_beats_mean_predictor_on_planted_linear():
    X, y = forest_oracle_data(4, n=600)
    f = fit_forest(X[:400], y[:400], trees=60, seed=1)
    pred = predict_forest(f, X[400:])
    assert _mse(pred, y[400:]) < _mse(np.full(200, y[:400].mean()), y[400:])


def test_training_mse_non_increasing_at_checkpoints():
    X, y = forest_oracle_data(6, n=300)
    full = fit_forest(X, y, trees=100, seed=3)
    per_tree = full.tree_predictions(X)
    mses = [_mse(per_tree[:k].mean(axis=0), y) for k in (1, 10, 100)]
    assert mses[0] >= mses[1] >= mses[2]
    # the first k trees of a larger forest are the k-tree forest itself
    small = fit_forest(X, y, trees=10, seed=3)
    assert np.array_equal(small.tree_predictions(X), per_tree[:10])


# ---------------------------------------------------------------- importance


@pytest.mark.parametrize("seed", range(3))
def test_dominant_feature_ranked_first(seed):
    X, y = forest_oracle_data(seed, n=500)
    f = fit_forest(X, y, trees=60, seed=seed)
    report = oob_permutation_importance(f, X, y, seed=seed)
    assert report.ordered()[0] == "x1"
    assert sorted(report.rank.values()) == [1, 2, 3, 4, 5]


def test_noise_features_near_zero():
    X, y = forest_oracle_data(11, n=500)
    f = fit_forest(X, y, trees=60, seed=11)
    report = oob_permutation_importance(f, X, y, repeats=2, seed=11)
    for name in ("x3", "x4", "x5"):
        assert abs(report.pct_inc_mse[name]) < 5


def test_unused_feature_scores_exactly_zero():
    X, y = forest_oracle_data(2, n=200)
    X[:, 4] = 1.0  # constant column can never be split on
    f = fit_forest(X, y, trees=20, seed=0)
    assert not any(4 in t.used_features() for t in f.trees)
    assert oob_permutation_importance(f, X, y, seed=5).pct_inc_mse["x5"] == 0.0


def test_oob_mse_uses_only_out_of_bag_trees():
    X, y = forest_oracle_data(8, n=120)
    f = fit_forest(X, y, trees=25, seed=2)
    report = oob_permutation_importance(f, X, y)
    preds = f.tree_predictions(X)
    manual = []
    for r in range(len(y)):
        trees = [i for i in range(25) if r not in set(f.bootstrap[i])]
        if trees:
            manual.append((preds[trees, r].mean() - y[r]) ** 2)
    assert report.rows_used == len(manual)
    assert report.baseline_mse == pytest.approx(np.mean(manual), rel=1e-12)


def test_rows_without_oob_tree_warn():
    X, y = forest_oracle_data(0, n=40)
    f = fit_forest(X, y, trees=1, seed=0)
    with pytest.warns(UserWarning, match="out-of-bag for no tree"):
        report = oob_permutation_importance(f, X, y)
    assert report.rows_used == int(f.oob[0].sum())


def test_hdd_planted_driver_ranked_first():
    panel = generate_synthetic(SyntheticConfig(cities=2, days=500, seed=3))
    X = np.column_stack([panel.variable(v).reshape(-1) for v in PANEL_BASE])
    y = panel.variable("PM25").reshape(-1)
    f = fit_forest(X, y, trees=80, seed=3, feature_names=PANEL_BASE)
    assert oob_permutation_importance(f, X, y, seed=3).ordered()[0] == "HDD"


def test_importance_export(tmp_path):
    X, y = forest_oracle_data(0, n=100)
    f = fit_forest(X, y, trees=30, seed=0, feature_names=list("abcde"))
    report = oob_permutation_importance(f, X, y)
    rows = report.to_csv(tmp_path / "imp.csv").read_text().splitlines()
    assert rows[0] == "feature,pct_inc_mse,rank"
    assert rows[1].startswith("a,") and rows[1].endswith(",1")
    assert len(rows) == 6
