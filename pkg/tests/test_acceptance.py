"""Acceptance criteria, one test (and one PASS/FAIL line) each.

Lines are printed with ``-s`` and collected in an "acceptance criteria"
section of the terminal summary.
"""
import itertools
import json
import math
import random
import time
from pathlib import Path

import numpy as np

from airphys.cli import main
from airphys.cluster import VariablePointSet, hierarchical, kmeans
from airphys.dataset import (
    VARIABLES,
    RawRecord,
    SyntheticConfig,
    aggregate_city_daily,
    generate_synthetic,
    impute_missing,
    parse_csv,
    records_to_csv,
)
from airphys.errors import LeakageError
from airphys.evaluation import accuracy_gain, read_comparison
from airphys.features import SplitIndex, chronological_split
from airphys.forecaster import PbdlConfig, build_sequences, predict_standardized, train_pbdl
from airphys.forest import fit_forest, oob_permutation_importance
from airphys.neural import LstmCellParams, lstm_cell_step
from airphys.panel import rank_features_by_significance

from gradcheck import random_network, worst_mismatch
from oracles import PLANTED_PM25, forest_oracle_data, planted_panel_fit

GOLDEN = Path(__file__).parent / "fixtures" / "golden"
GOLDEN_EXPECTED = Path(__file__).parent / "fixtures" / "golden_expected.csv"


def sig(z):
    return 1 / (1 + math.exp(-z))


def test_criterion_01_gradients(verdict):
    start = time.perf_counter()
    worst = max(worst_mismatch(*random_network(seed)) for seed in range(50))
    elapsed = time.perf_counter() - start
    verdict(1, "gradient check on 50 random networks", worst <= 1.0 and elapsed < 30,
            f"worst error / tolerance {worst:.3f}, {elapsed:.1f} s")


def test_criterion_02_lstm_cell(verdict):
    start = time.perf_counter()
    w = dict(W_i=0.5, U_i=-0.3, b_i=0.1, W_f=-0.2, U_f=0.4, b_f=1.0,
             W_o=0.7, U_o=0.2, b_o=-0.1, W_g=1.1, U_g=-0.6, b_g=0.05)
    x, h, c = 0.9, -0.4, 0.25
    i, f = sig(0.5 * x - 0.3 * h + 0.1), sig(-0.2 * x + 0.4 * h + 1.0)
    o, g = sig(0.7 * x + 0.2 * h - 0.1), math.tanh(1.1 * x - 0.6 * h + 0.05)
    c_ref = f * c + i * g
    h_ref = o * math.tanh(c_ref)

    def cell(**weights):
        return LstmCellParams.from_arrays(*({k: weights.get(f"{m}_{k}", 0.0) for k in "ifog"} for m in "WUb"))

    h1, c1 = lstm_cell_step(np.array([x]), np.array([h]), np.array([c]), cell(**w))
    hand = max(abs(h1.value[0] - h_ref), abs(c1.value[0] - c_ref))
    # zero weights: i = f = o = 0.5, g = 0, so c' = c / 2 and h' = tanh(c') / 2
    h0, c0 = lstm_cell_step(np.array([2.0]), np.array([-0.3]), np.array([0.8]), cell())
    zero = max(abs(c0.value[0] - 0.4), abs(h0.value[0] - 0.5 * math.tanh(0.4)))
    elapsed = time.perf_counter() - start
    verdict(2, "one-unit LSTM cell against hand values", hand <= 1e-10 and zero <= 1e-10 and elapsed < 1,
            f"hand error {hand:.1e}, zero-weight error {zero:.1e}, {elapsed:.3f} s")


def test_criterion_03_panel_ols(verdict):
    start = time.perf_counter()
    recovered = first = 0
    for seed in range(20):
        fit = planted_panel_fit(seed)
        recovered += all(abs(fit.coefficients[t] - b) <= 3 * fit.standard_errors[t] for t, b in PLANTED_PM25.items())
        first += rank_features_by_significance(fit, 1)[0] == "HDD^2"
    elapsed = time.perf_counter() - start
    verdict(3, "planted panel coefficients", recovered == 20 and first >= 18 and elapsed < 60,
            f"all within 3 SE in {recovered}/20 seeds, strongest first in {first}/20, {elapsed:.1f} s")


def test_criterion_04_clustering(verdict):
    start = time.perf_counter()
    line = VariablePointSet(("a", "b", "c", "d"), np.array([[0.0], [1.0], [10.0], [11.0]]))
    res = kmeans(line, 2, seed=0)
    X = line.points[:, 0]
    brute = min(
        sum(((X[np.array(lab) == g] - X[np.array(lab) == g].mean()) ** 2).sum() for g in (0, 1))
        for lab in itertools.product((0, 1), repeat=4) if len(set(lab)) == 2
    )
    groups = {frozenset(n for n, c in res.assignments.items() if c == k) for k in set(res.assignments.values())}
    kmeans_ok = res.inertia == 1.0 == brute and groups == {frozenset("ab"), frozenset("cd")}
    three = VariablePointSet(("p0", "p1", "p2"), np.array([[0.0], [1.0], [10.0]]))
    merges = hierarchical(three, "single").merges
    elapsed = time.perf_counter() - start
    verdict(4, "k-means line and single-linkage fixtures",
            kmeans_ok and merges == [(0, 1, 1.0), (2, 3, 9.0)] and elapsed < 1,
            f"inertia {res.inertia} (brute force {brute}), merges {merges}, {elapsed:.3f} s")


def test_criterion_05_forest_importance(verdict):
    start = time.perf_counter()
    first, noise = 0, []
    for seed in range(20):
        X, y = forest_oracle_data(seed)
        forest = fit_forest(X, y, trees=200, seed=seed)
        imp = oob_permutation_importance(forest, X, y, seed=seed)
        first += imp.ordered()[0] == "x1"
        noise += [abs(imp.pct_inc_mse[f"x{j}"]) for j in (3, 4, 5)]
    elapsed = time.perf_counter() - start
    mean_noise = float(np.mean(noise))
    verdict(5, "forest permutation importance", first >= 19 and mean_noise < 5 and elapsed < 120,
            f"x1 first in {first}/20, noise mean |%IncMSE| {mean_noise:.2f}, {elapsed:.1f} s")


def test_criterion_06_physics_benefit(verdict):
    start = time.perf_counter()
    with_ode, without, drops = [], [], []
    for seed in range(5):
        panel = generate_synthetic(SyntheticConfig(cities=3, days=3000, seed=seed, dynamics="rate", noise_sd=1.0))
        train, test = build_sequences(panel, "PM25", 7)
        for lam, sink in ((1.0, with_ode), (0.0, without)):
            model = train_pbdl(train, PbdlConfig(units=64, lr=1e-3, epochs=40, batch_size=64, l2=0.0,
                                                 ode_weight=lam, seed=seed))
            sink.append(float(np.sqrt(np.mean((predict_standardized(model, test) - test.targets) ** 2))))
            if lam == 1.0:
                drops.append(model.trace.initial["ode"] / model.trace.ode[-1])
    elapsed = time.perf_counter() - start
    med1, med0 = float(np.median(with_ode)), float(np.median(without))
    verdict(6, "ODE term helps on a rate-law panel", med1 <= med0 and min(drops) >= 10 and elapsed < 600,
            f"median RMSE {med1:.4f} with vs {med0:.4f} without, smallest ODE drop {min(drops):.1f}x, {elapsed:.0f} s")


def test_criterion_07_lambda_zero(verdict):
    panel = generate_synthetic(SyntheticConfig(cities=2, days=300, seed=4, dynamics="rate", noise_sd=1.0))
    train, _ = build_sequences(panel, "NOx", 7)
    base = dict(units=16, lr=1e-3, epochs=8, batch_size=32, l2=0.01, ode_weight=0.0, seed=11)
    plain = train_pbdl(train, PbdlConfig(**base))
    detached = train_pbdl(train, PbdlConfig(**base, detach_ode_head=True))
    gap = max(float(np.max(np.abs(np.subtract(getattr(plain.trace, k), getattr(detached.trace, k)))))
              for k in ("total", "data", "ode"))
    verdict(7, "lambda = 0 matches the detached-head network", gap <= 1e-12,
            f"largest per-epoch trace gap {gap:.1e} over {len(plain.trace)} epochs")


def test_criterion_08_table2_golden(tmp_path, verdict):
    out = str(tmp_path / "out")
    codes = (main(["evaluate", "--out", out, "--set", f"evaluate.predictions={GOLDEN}"]),
             main(["report", "--out", out]))
    produced = read_comparison(Path(out) / "report" / "comparison.csv")
    expected = read_comparison(GOLDEN_EXPECTED)
    cells_match = [(r.city, r.pollutant, r.winner) for r in produced] == [(e.city, e.pollutant, e.winner) for e in expected]
    values_match = cells_match and all(
        round(getattr(r, f), 4) == getattr(e, f) for r, e in zip(produced, expected) for f in ("lstm_rmse", "pbdl_rmse")
    ) and all(
        round(getattr(r, f), 2) == getattr(e, f) for r, e in zip(produced, expected) for f in ("gain_mean", "gain_max")
    )
    gain = accuracy_gain(10.88, 1.0320, 0.4448)
    ok = codes == (0, 0) and values_match and round(gain, 2) == 6.39 and round(accuracy_gain(53, 1.0320, 0.4448), 2) == 31.12
    verdict(8, "Table 2 golden comparison and accuracy gain", ok,
            f"exit codes {codes}, {len(produced)} cells reproduced, gain {gain:.6f} -> {gain:.2f}")


E2E = {
    "data": {"synthetic": {"cities": 3, "days": 730, "dynamics": "rate", "noise_sd": 1.0}},
    "tune": {"trials": 2, "runs_per_trial": 2,
             "lstm": {"fixed": {"epochs": 3, "batch_size": 64},
                      "domains": {"units": [16, 32], "layer_units": [16, 32], "units_last": [16, 32],
                                  "num_layers": [1, 2]}},
             "pbdl": {"fixed": {"epochs": 5, "batch_size": 64}}},
    "models": {"lstm": {"epochs": 10}, "pbdl": {"epochs": 40}},
}


def test_criterion_09_end_to_end_determinism(tmp_path, verdict):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(E2E))
    start = time.perf_counter()
    outputs, codes = [], []
    for run in ("first", "second"):
        out = tmp_path / run
        for command in ("synth", "tune", "train", "evaluate", "report"):
            codes.append(main([command, "--config", str(config), "--out", str(out), "--seed", "7"]))
        outputs.append((out / "report" / "comparison.csv").read_bytes())
    elapsed = time.perf_counter() - start
    rows = len(outputs[0].splitlines()) - 1
    verdict(9, "two seeded pipeline runs agree byte for byte",
            set(codes) == {0} and outputs[0] == outputs[1] and rows == 6 and elapsed < 900,
            f"{rows} comparison rows, identical={outputs[0] == outputs[1]}, {elapsed:.0f} s")


def test_criterion_10_leakage_guard(verdict):
    panel = generate_synthetic(SyntheticConfig(cities=2, days=80, seed=3, dynamics="rate"))
    caught = 0
    # shuffled dates inside a city
    dates = panel.days.copy()
    random.Random(0).shuffle(dates)
    try:
        chronological_split({"Oslo": 80}, 0.8, {"Oslo": dates})
    except LeakageError:
        caught += 1
    # a split whose train rows sit after its test rows
    bad = SplitIndex(np.r_[0:40, 60:80, 80:144], np.r_[40:60, 144:160], ((0, 80, 60), (80, 160, 144)))
    try:
        build_sequences(panel, "PM25", 5, split=bad)
    except LeakageError:
        caught += 1
    # shuffled raw rows are put back in date order before windows are cut
    records = [
        RawRecord(day, city, "s1", var, float(v))
        for c, city in enumerate(panel.cities) for d, day in enumerate(panel.dates())
        for var, v in zip(VARIABLES, panel.values[c, d])
    ]
    random.Random(1).shuffle(records)
    rebuilt, _ = impute_missing(aggregate_city_daily(parse_csv(records_to_csv(records))))
    rebuilt = rebuilt.select(panel.cities)
    train, test = build_sequences(rebuilt, "PM25", 5)
    ordered = all(
        train.dates[[c == city for c in train.cities]].max() < test.dates[[c == city for c in test.cities]].min()
        for city in rebuilt.cities
    )
    reference, _ = build_sequences(panel, "PM25", 5)
    same = np.allclose(train.windows, reference.windows)
    verdict(10, "leakage guard", caught == 2 and ordered and same,
            f"{caught}/2 adversarial splits rejected, every test target after every train target={ordered}")
