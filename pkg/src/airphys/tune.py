"""Seeded random hyperparameter search scored by validation MSE."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import DivergenceError, SearchFailedError, SplitError
from .forecaster import (
    LstmConfig,
    PbdlConfig,
    SequenceDataset,
    predict_standardized,
    train_lstm,
    train_pbdl,
)
from .parallel import ordered_map
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)

LSTM_UNITS = tuple(range(32, 513, 16))
LSTM_DROPOUT = (0.2, 0.4, 0.6, 0.8)
LSTM_LAYERS = (1, 2, 3, 4)
LSTM_LR = (1e-2, 1e-3, 1e-4)
PBDL_LR = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2)
PBDL_UNITS = tuple(range(50, 201))
PBDL_LAYERS = (1, 2, 3, 4)
PBDL_L2 = (0.0, 1e-2, 1e-3)
PBDL_ODE_WEIGHT = (0.1, 1.0, 10.0)

# per-layer keys of the LSTM space are drawn once per possible layer
LAYER_KEYS = ("layer_units", "layer_dropout")


@dataclass(frozen=True)
class SearchSpace:
    """Finite domains per hyperparameter; ``fixed`` holds non-searched settings."""

    model: str  # "lstm" | "pbdl"
    domains: dict[str, tuple]
    fixed: dict[str, Any] = field(default_factory=dict)
    extensions: tuple[str, ...] = ()

    def __post_init__(self):
        if self.model not in ("lstm", "pbdl"):
            raise ValueError(f"unknown model {self.model!r}")
        object.__setattr__(self, "domains", {k: tuple(v) for k, v in self.domains.items()})
        for name, dom in self.domains.items():
            if not dom:
                raise ValueError(f"empty domain for {name}")
        need = (
            {"units", "dropout_rate", "num_layers", *LAYER_KEYS, "units_last", "dropout_rate_last", "learning_rate"}
            if self.model == "lstm"
            else {"lr", "units", "layers", "l2"}
        )
        missing = need - set(self.domains)
        if missing:
            raise ValueError(f"search space lacks {sorted(missing)}")

    def build(self, params: dict[str, Any], seed: int) -> LstmConfig | PbdlConfig:
        if self.model == "lstm":
            n = params["num_layers"]
            return LstmConfig.from_tuner(
                params["units"],
                params["dropout_rate"],
                n,
                params["layer_units"][:n],
                params["layer_dropout"][:n],
                params["units_last"],
                params["dropout_rate_last"],
                params["learning_rate"],
                seed=seed,
                **self.fixed,
            )
        return PbdlConfig(seed=seed, **{**self.fixed, **params})

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model, "domains": {k: list(v) for k, v in self.domains.items()},
                "fixed": dict(self.fixed), "extensions": list(self.extensions)}


def lstm_space(**fixed) -> SearchSpace:
    return SearchSpace(
        "lstm",
        {
            "units": LSTM_UNITS,
            "dropout_rate": LSTM_DROPOUT,
            "num_layers": LSTM_LAYERS,
            "layer_units": LSTM_UNITS,
            "layer_dropout": LSTM_DROPOUT,
            "units_last": LSTM_UNITS,
            "dropout_rate_last": LSTM_DROPOUT,
            "learning_rate": LSTM_LR,
        },
        fixed,
    )


def pbdl_space(**fixed) -> SearchSpace:
    return SearchSpace(
        "pbdl",
        {"lr": PBDL_LR, "units": PBDL_UNITS, "layers": PBDL_LAYERS, "l2": PBDL_L2, "ode_weight": PBDL_ODE_WEIGHT},
        fixed,
        extensions=("ode_weight",),
    )


def _plain(v):
    return v.item() if isinstance(v, np.generic) else v


def sample_config(space: SearchSpace, seed: int) -> dict[str, Any]:
    """One uniform, independent draw per hyperparameter (in domain-name order)."""
    rng = stream(seed, "sample")
    out: dict[str, Any] = {}
    depth = max(space.domains.get("num_layers", (0,)))
    for name in sorted(space.domains):
        dom = space.domains[name]
        if space.model == "lstm" and name in LAYER_KEYS:
            out[name] = tuple(_plain(dom[int(rng.integers(len(dom)))]) for _ in range(depth))
        else:
            out[name] = _plain(dom[int(rng.integers(len(dom)))])
    return out


@dataclass
class Trial:
    index: int
    params: dict[str, Any]
    seeds: list[int]
    val_losses: list[float]
    status: str = "ok"  # "ok" | "failed"

    @property
    def mean_val_loss(self) -> float:
        return math.fsum(self.val_losses) / len(self.val_losses) if self.status == "ok" else math.inf


@dataclass
class TuneReport:
    space: SearchSpace
    trials: list[Trial]
    best_index: int

    @property
    def best_trial(self) -> Trial:
        return self.trials[self.best_index]

    @property
    def best_params(self) -> dict[str, Any]:
        return self.best_trial.params

    def best_config(self, seed: int = 0) -> LstmConfig | PbdlConfig:
        return self.space.build(self.best_params, seed)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("trial", "config_json", "mean_val_loss", "status"))
            for t in self.trials:
                w.writerow((t.index, json.dumps(t.params, sort_keys=True), repr(t.mean_val_loss), t.status))
        return path

    def to_dict(self) -> dict[str, Any]:
        return {
            "space": self.space.to_dict(),
            "best_trial": self.best_index,
            "best_params": self.best_params,
            "extensions": list(self.space.extensions),
            "trials": [
                {"trial": t.index, "params": t.params, "seeds": t.seeds, "val_losses": t.val_losses, "status": t.status}
                for t in self.trials
            ],
        }


def validation_loss(model, val: SequenceDataset) -> float:
    pred = predict_standardized(model, val)
    return float(np.mean((pred - val.targets) ** 2))


def _trainer(model: str) -> Callable:
    return train_lstm if model == "lstm" else train_pbdl


def random_search(
    space: SearchSpace,
    train: SequenceDataset,
    val: SequenceDataset,
    trials: int = 10,
    runs_per_trial: int = 2,
    seed: int = 0,
    workers: int | None = None,
) -> TuneReport:
    """Train ``runs_per_trial`` models per sampled config; keep the lowest mean val loss.

    A run that diverges marks its trial failed (infinite loss) and the
    search moves on.  Ties go to the earliest trial.
    """
    if len(val) == 0:
        raise SplitError("validation set is empty")
    if trials < 1 or runs_per_trial < 1:
        raise ValueError("need at least one trial and one run per trial")
    fit = _trainer(space.model)

    def run_trial(i: int) -> Trial:
        params = sample_config(space, derive_seed(seed, "trial", i))
        seeds = [derive_seed(seed, "trial", i, "run", r) for r in range(runs_per_trial)]
        trial = Trial(i, params, seeds, [])
        for s in seeds:
            try:
                loss = validation_loss(fit(train, space.build(params, s)), val)
            except DivergenceError as exc:
                log.warning("trial %d diverged: %s", i, exc)
                trial.status = "failed"
                break
            if not math.isfinite(loss):
                trial.status = "failed"
                break
            trial.val_losses.append(loss)
        if trial.status == "failed":
            trial.val_losses = [math.inf] * runs_per_trial
        return trial

    done = ordered_map(run_trial, range(trials), workers)
    ok = [t for t in done if t.status == "ok"]
    if not ok:
        raise SearchFailedError(f"all {trials} trials failed")
    best = min(ok, key=lambda t: (t.mean_val_loss, t.index))
    return TuneReport(space, done, best.index)
