"""Batch command line: ``airphys <command> [--config PATH] [--out DIR] [--seed N] [--set k=v]``.

Each command reads its upstream artifacts from the output directory,
writes its own CSV/JSON artifacts under ``<out>/<command>/`` and a
``manifest.json`` recording digests of what it read and wrote.

Exit codes: 0 success, 1 configuration error, 2 data error or missing
artifact, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import json
import logging
import platform
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy

from . import cluster as clu
from .dataset import (
    COVARIATES,
    POLLUTANTS,
    CityDailyPanel,
    SyntheticConfig,
    aggregate_city_daily,
    generate_synthetic,
    impute_missing,
    parse_csv,
)
from .errors import AirPhysError, ConfigError, DivergenceError, MissingArtifactError, SearchFailedError
from .evaluation import (
    MetricsReport,
    compare_models,
    export_plot_data,
    metrics_row,
    read_predictions,
    write_comparison,
)
from .features import FeatureSpec, apply_standardizer, build_design, chronological_split, fit_standardizer, response
from .forecaster import (
    LstmConfig,
    PbdlConfig,
    TrainedModel,
    build_sequences,
    predict,
    train_lstm,
    train_pbdl,
)
from .forest import fit_forest, oob_permutation_importance
from .panel import correlation_matrix, fit_panel_ols, rank_features_by_significance
from .parallel import ordered_map
from .seeding import derive_seed
from .tune import SearchSpace, TuneReport, lstm_space, pbdl_space, random_search

log = logging.getLogger("airphys")

COMMANDS = ("ingest", "synth", "features", "panel", "cluster", "forest", "tune", "train", "evaluate", "report")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "out": "airphys-out",
    "data": {
        "paths": None,
        "synthetic": {"cities": 3, "days": 3650, "missing_rate": 0.0, "dynamics": "rate", "noise_sd": 1.0},
    },
    "features": {
        "base_variables": list(COVARIATES),
        "degree": 3,
        "time_dummies": True,
        "fixed_effects": ["city", "year"],
    },
    "split": {"fraction": 0.8},
    "panel": {"targets": list(POLLUTANTS), "top_k": 10},
    "cluster": {"k": 2, "linkage": "average", "variables": None},
    "forest": {"targets": list(POLLUTANTS), "trees": 200, "mtry": None, "min_leaf": 5, "repeats": 1},
    "sequence": {"window": 7},
    "tune": {
        "trials": 10,
        "runs_per_trial": 2,
        "val_fraction": 0.2,
        "lstm": {"fixed": {"epochs": 5, "batch_size": 64}, "domains": {}},
        "pbdl": {"fixed": {"epochs": 5, "batch_size": 64}, "domains": {}},
    },
    "models": {
        "lstm": {"units": [32], "dropout": [0.2], "lr": 0.001, "epochs": 20, "batch_size": 64},
        "pbdl": {"layers": 1, "units": 64, "activation": "elu", "l2": 0.0, "lr": 0.001, "epochs": 40,
                 "batch_size": 64, "ode_weight": 1.0},
    },
    "train": {"models": ["lstm", "pbdl"], "pollutants": list(POLLUTANTS), "use_tuned": True},
    "evaluate": {"predictions": None},
}


# ------------------------------------------------------------------ config


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = config
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(text)


def load_config(path: str | None, overrides: list[str], seed: int | None, out: str | None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            config = _merge(config, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for assignment in overrides:
        apply_override(config, assignment)
    if seed is not None:
        config["seed"] = seed
    if out is not None:
        config["out"] = out
    data = config.get("data") or {}
    if (data.get("paths") is None) == (data.get("synthetic") is None):
        raise ConfigError("set exactly one of data.paths and data.synthetic")
    if not isinstance(config.get("seed"), int):
        raise ConfigError("seed must be an integer")
    return config


# ---------------------------------------------------------------- artifacts


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.name != "manifest.json"))
        elif p.is_file():
            out.append(p)
    return out


def _version() -> str:
    try:
        return metadata.version("airphys")
    except metadata.PackageNotFoundError:
        return "unknown"


class Stage:
    """Output directory of one command plus its manifest bookkeeping."""

    def __init__(self, config: dict, name: str):
        self.config = config
        self.root = Path(config["out"])
        self.name = name
        self.dir = self.root / name
        self.inputs: list[Path] = []

    def upstream(self, name: str, required: str | None = None) -> Path:
        d = self.root / name
        probe = d / required if required else d
        if not probe.exists():
            raise MissingArtifactError(f"missing upstream artifact {probe}; run `{name}` first")
        self.inputs.append(probe)
        return probe

    def write_manifest(self, command: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        rel = lambda p: str(p.relative_to(self.root)) if p.is_relative_to(self.root) else str(p)  # noqa: E731
        doc = {
            "command": command,
            "seed": self.config["seed"],
            "config_digest": hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest(),
            "inputs": {rel(p): _digest(p) for p in _files(self.inputs)},
            "outputs": {rel(p): _digest(p) for p in _files([self.dir])},
            "versions": {"airphys": _version(), "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        }
        path = self.dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path: Path, doc: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_panel(stage: Stage) -> CityDailyPanel:
    return CityDailyPanel.from_csv(stage.upstream("data", "panel"))


def _save_panel(stage: Stage, panel: CityDailyPanel, report) -> None:
    panel.to_csv(stage.dir / "panel")
    _write_json(stage.dir / "imputation.json", {
        "missing_fraction_before": report.missing_fraction_before,
        "missing_fraction_after": report.missing_fraction_after,
        "imputed_counts": report.imputed_counts,
        "iterations_used": report.iterations_used,
    })


def _feature_spec(config: dict, target: str) -> FeatureSpec:
    f = config["features"]
    return FeatureSpec(tuple(f["base_variables"]), int(f["degree"]), bool(f["time_dummies"]),
                       tuple(f["fixed_effects"]), target)


# ------------------------------------------------------------------ commands


def cmd_ingest(config: dict, args) -> None:
    paths = config["data"].get("paths")
    if not paths:
        raise ConfigError("ingest needs data.paths")
    stage = Stage(config, "data")
    records = []
    for p in paths:
        if not Path(p).is_file():
            raise MissingArtifactError(f"input file {p} not found")
        stage.inputs.append(Path(p))
        records.extend(parse_csv(Path(p)))
    panel, report = impute_missing(aggregate_city_daily(records))
    _save_panel(stage, panel, report)
    stage.write_manifest("ingest")


def cmd_synth(config: dict, args) -> None:
    syn = config["data"].get("synthetic")
    if not syn:
        raise ConfigError("synth needs data.synthetic")
    try:
        sc = SyntheticConfig(seed=derive_seed(config["seed"], "synth"), **syn)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synthetic config: {exc}") from exc
    panel, report = impute_missing(generate_synthetic(sc))
    stage = Stage(config, "data")
    _save_panel(stage, panel, report)
    stage.write_manifest("synth")


def cmd_features(config: dict, args) -> None:
    stage = Stage(config, "features")
    panel = _load_panel(stage)
    design = build_design(panel, _feature_spec(config, POLLUTANTS[0]))
    design.to_csv(stage.dir / "design.csv")
    _write_json(stage.dir / "standardizer.json", fit_standardizer(design).to_dict())
    split = chronological_split({c: panel.n_days for c in panel.cities}, config["split"]["fraction"])
    _write_json(stage.dir / "split.json", {"layout": [list(x) for x in split.layout]})
    stage.write_manifest("features")


def cmd_panel(config: dict, args) -> None:
    stage = Stage(config, "panel")
    panel = _load_panel(stage)
    top_k = int(config["panel"]["top_k"])
    rankings = {}
    for target in config["panel"]["targets"]:
        design = build_design(panel, _feature_spec(config, target))
        design = apply_standardizer(fit_standardizer(design), design)
        fit = fit_panel_ols(design, response(panel, target), config["features"]["fixed_effects"])
        fit.to_csv(stage.dir / f"{target}_coefficients.csv")
        rankings[target] = rank_features_by_significance(fit, min(top_k, len(fit.features())))
        _write_json(stage.dir / f"{target}_fit.json", {"r_squared": fit.r_squared, "n": fit.n, "p": fit.p})
    _write_json(stage.dir / "ranking.json", rankings)
    correlation_matrix(panel).to_csv(stage.dir / "correlation.csv")
    stage.write_manifest("panel")


def cmd_cluster(config: dict, args) -> None:
    stage = Stage(config, "cluster")
    panel = _load_panel(stage)
    cc = config["cluster"]
    points = clu.variable_points(panel, cc.get("variables"))
    km = clu.kmeans(points, int(cc["k"]), seed=derive_seed(config["seed"], "cluster"))
    clu.write_assignments(km.assignments, stage.dir / "kmeans.csv")
    dendro = clu.hierarchical(points, cc["linkage"])
    dendro.to_csv(stage.dir / "dendrogram.csv")
    clu.write_assignments(clu.cut_dendrogram(dendro, int(cc["k"])), stage.dir / "hierarchical.csv")
    _write_json(stage.dir / "kmeans.json", {"inertia": km.inertia, "iterations": km.iterations,
                                             "clusters": km.clusters(), "leaves": list(dendro.leaves)})
    stage.write_manifest("cluster")


def cmd_forest(config: dict, args) -> None:
    stage = Stage(config, "forest")
    panel = _load_panel(stage)
    fc = config["forest"]
    X = np.stack([np.asarray(panel.variable(v)).reshape(-1) for v in COVARIATES], axis=1)
    for target in fc["targets"]:
        y = response(panel, target)
        seed = derive_seed(config["seed"], "forest", target)
        forest = fit_forest(X, y, trees=int(fc["trees"]), mtry=fc["mtry"], min_leaf=int(fc["min_leaf"]), seed=seed,
                            feature_names=COVARIATES)
        report = oob_permutation_importance(forest, X, y, repeats=int(fc["repeats"]), seed=seed)
        report.to_csv(stage.dir / f"{target}_importance.csv")
    stage.write_manifest("forest")


def _models(config: dict, args) -> list[str]:
    models = [args.model] if getattr(args, "model", None) else list(config["train"]["models"])
    for m in models:
        if m not in ("lstm", "pbdl"):
            raise ConfigError(f"unknown model {m!r}")
    return models


def _space(config: dict, model: str) -> SearchSpace:
    tc = config["tune"][model]
    base = lstm_space() if model == "lstm" else pbdl_space()
    domains = {**base.domains, **{k: tuple(v) for k, v in (tc.get("domains") or {}).items()}}
    try:
        return SearchSpace(model, domains, dict(tc.get("fixed") or {}), base.extensions)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {model} search space: {exc}") from exc


def cmd_tune(config: dict, args) -> None:
    stage = Stage(config, "tune")
    panel = _load_panel(stage)
    tc = config["tune"]
    window = int(config["sequence"]["window"])
    for model in _models(config, args):
        space = _space(config, model)
        for pol in config["train"]["pollutants"]:
            train, _ = build_sequences(panel, pol, window, fraction=config["split"]["fraction"])
            fit, val = train.chronological_tail(tc["val_fraction"])
            report = random_search(space, fit, val, int(tc["trials"]), int(tc["runs_per_trial"]),
                                   seed=derive_seed(config["seed"], "tune", model, pol))
            report.to_csv(stage.dir / f"{model}_{pol}.csv")
            _write_json(stage.dir / f"{model}_{pol}.json", report.to_dict())
    stage.write_manifest("tune")


def _model_config(config: dict, model: str, pol: str, seed: int):
    tuned = Path(config["out"]) / "tune" / f"{model}_{pol}.json"
    base = dict(config["models"][model])
    if config["train"].get("use_tuned", True) and tuned.is_file():
        doc = json.loads(tuned.read_text())
        space = _space(config, model)
        cfg = space.build(doc["best_params"], seed)
        keep = {k: base[k] for k in ("epochs", "batch_size") if k in base}
        merged = {**cfg.to_dict(), **keep, "seed": seed}
        return (LstmConfig if model == "lstm" else PbdlConfig).from_dict(merged), tuned
    try:
        return (LstmConfig if model == "lstm" else PbdlConfig).from_dict({**base, "seed": seed}), None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {model} model config: {exc}") from exc


def cmd_train(config: dict, args) -> None:
    stage = Stage(config, "train")
    panel = _load_panel(stage)
    window = int(config["sequence"]["window"])
    jobs = [(m, p, c) for m in _models(config, args) for p in config["train"]["pollutants"] for c in panel.cities]

    def run(job):
        model, pol, city = job
        cfg, tuned = _model_config(config, model, pol, derive_seed(config["seed"], "train", model, pol, city))
        train, _ = build_sequences(panel.select([city]), pol, window, fraction=config["split"]["fraction"])
        trained = (train_lstm if model == "lstm" else train_pbdl)(train, cfg)
        return job, trained, tuned

    for (model, pol, city), trained, tuned in ordered_map(run, jobs):
        if tuned is not None:
            stage.inputs.append(tuned)
        trained.save(stage.dir / f"{model}_{city}_{pol}.json")
        trained.trace.to_csv(stage.dir / f"{model}_{city}_{pol}_loss_trace.csv")
    stage.write_manifest("train")


def _artifact_key(path: Path) -> tuple[str, str, str]:
    """``<model>_<city>_<pollutant>`` file stem; city names may contain underscores."""
    model, rest = path.stem.split("_", 1)
    city, pol = rest.rsplit("_", 1)
    return model, city, pol


def _pollutant_scale(panel: CityDailyPanel, pol: str) -> tuple[float, float]:
    y = np.asarray(panel.variable(pol))
    return float(y.mean()), float(y.max())


def _metrics_from_models(stage: Stage, config: dict) -> list:
    train_dir = stage.upstream("train")
    panel = _load_panel(stage)
    files = sorted(p for p in train_dir.glob("*.json") if p.name != "manifest.json")
    if not files:
        raise MissingArtifactError(f"no trained models in {train_dir}; run `train` first")
    rows = []
    for path in files:
        model = TrainedModel.load(path)
        _, city, pol = _artifact_key(path)
        _, test = build_sequences(panel.select([city]), pol, model.window,
                                  fraction=config["split"]["fraction"],
                                  standardizers=(model.input_standardizer, model.target_standardizer))
        export_plot_data(model, test, stage.dir / "plots", prefix=f"{path.stem}_")
        mean, vmax = _pollutant_scale(panel, pol)
        rows.append(metrics_row(model.architecture, city, pol, predict(model, test), test.raw_targets(),
                                float(model.target_standardizer.sd[0]), mean, vmax))
    return rows


def _metrics_from_predictions(stage: Stage, directory: Path) -> list:
    """Prediction CSVs named ``<model>_<city>_<pollutant>.csv`` plus ``scales.csv``."""
    if not (directory / "scales.csv").is_file():
        raise MissingArtifactError(f"{directory} lacks scales.csv")
    stage.inputs.append(directory)
    with open(directory / "scales.csv", newline="") as fh:
        scales = {(d["city"], d["pollutant"]): d for d in csv.DictReader(fh)}
    rows = []
    for path in sorted(directory.glob("*.csv")):
        if path.name == "scales.csv":
            continue
        model, city, pol = _artifact_key(path)
        actual, pred = read_predictions(path)[city]
        s = scales[(city, pol)]
        rows.append(metrics_row(model, city, pol, pred, actual, float(s["target_sd"]),
                                float(s["target_mean"]), float(s["target_max"])))
    return rows


def cmd_evaluate(config: dict, args) -> None:
    stage = Stage(config, "evaluate")
    source = config["evaluate"].get("predictions")
    rows = _metrics_from_predictions(stage, Path(source)) if source else _metrics_from_models(stage, config)
    report = MetricsReport(rows, {"seed": config["seed"]})
    report.to_csv(stage.dir / "metrics.csv")
    write_comparison(compare_models([report]), stage.dir / "comparison.csv")
    stage.write_manifest("evaluate")


def cmd_report(config: dict, args) -> None:
    stage = Stage(config, "report")
    metrics = stage.upstream("evaluate", "metrics.csv")
    write_comparison(compare_models([MetricsReport.from_csv(metrics)]), stage.dir / "comparison.csv")
    summary: dict[str, Any] = {}
    ranking = Path(config["out"]) / "panel" / "ranking.json"
    if ranking.is_file():
        stage.inputs.append(ranking)
        summary["panel_ranking"] = json.loads(ranking.read_text())
    for target in POLLUTANTS:
        imp = Path(config["out"]) / "forest" / f"{target}_importance.csv"
        if imp.is_file():
            stage.inputs.append(imp)
            lines = imp.read_text().splitlines()[1:]
            summary.setdefault("forest_importance", {})[target] = [ln.split(",")[0] for ln in lines]
    _write_json(stage.dir / "feature_summary.json", summary)
    stage.write_manifest("report")


HANDLERS: dict[str, Callable[[dict, argparse.Namespace], None]] = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "features": cmd_features,
    "panel": cmd_panel,
    "cluster": cmd_cluster,
    "forest": cmd_forest,
    "tune": cmd_tune,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airphys", description="Air-quality panel analysis and forecasting.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON configuration document")
    parser.add_argument("--out", help="output directory (overrides config 'out')")
    parser.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, value parsed as JSON when possible")
    parser.add_argument("--model", choices=("lstm", "pbdl"), help="restrict tune/train to one model")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides, args.seed, args.out)
        HANDLERS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DivergenceError, SearchFailedError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 3
    except (AirPhysError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
