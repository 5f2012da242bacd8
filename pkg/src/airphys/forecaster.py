"""Supervised sequences and the two next-day forecasters.

* LSTM: stacked LSTM layers with dropout, dense head to a scalar.
* PBDL: dense trunk (ELU then batch norm per layer) with two heads, the
  next-day prediction and a rate head ``f`` trained against the one-day
  forward difference of the observed series:
  ``loss = mse(pred, y[t+1]) + lam * mean((f - (y[t+1] - y[t]))^2)``.

All values inside a ``SequenceDataset`` are on the standardized scale.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataset import COVARIATES, POLLUTANTS, CityDailyPanel
from .errors import ContractError, DivergenceError, InsufficientDataError, LeakageError, SplitError
from .features import SplitIndex, Standardizer, chronological_split, fit_column_stats
from .neural import autodiff as ad
from .neural.autodiff import Tensor
from .neural.checkpoint import params_from_dict, params_to_dict
from .neural.layers import (
    ACTIVATIONS,
    BN_EPSILON,
    BN_MOMENTUM,
    GATES,
    BatchNorm,
    LstmCellParams,
    NetworkParams,
    dense,
    dropout,
    he_normal_init,
    init_lstm_cell,
    l2_penalty,
    lstm_cell_step,
)
from .neural.optim import OptimizerState, nadam_step
from .seeding import stream

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 7


# --------------------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class SequenceDataset:
    windows: np.ndarray  # (n, window, features)
    targets: np.ndarray  # (n,) next-day target
    target_prev: np.ndarray | None  # (n,) target on the last window day
    cities: tuple[str, ...]  # per window
    dates: np.ndarray  # per window, date of the target day
    feature_names: tuple[str, ...]
    pollutant: str
    input_standardizer: Standardizer
    target_standardizer: Standardizer

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def window(self) -> int:
        return self.windows.shape[1]

    def subset(self, idx: Sequence[int]) -> "SequenceDataset":
        idx = np.asarray(idx, int)
        return SequenceDataset(
            self.windows[idx],
            self.targets[idx],
            None if self.target_prev is None else self.target_prev[idx],
            tuple(self.cities[i] for i in idx),
            self.dates[idx],
            self.feature_names,
            self.pollutant,
            self.input_standardizer,
            self.target_standardizer,
        )

    def raw_targets(self) -> np.ndarray:
        return self.target_standardizer.inverse(self.targets[:, None])[:, 0]

    def chronological_tail(self, fraction: float = 0.2) -> tuple["SequenceDataset", "SequenceDataset"]:
        """Per city, hold out the last ``fraction`` of windows (by target date)."""
        fit, hold = [], []
        for city in dict.fromkeys(self.cities):
            rows = [i for i, c in enumerate(self.cities) if c == city]
            rows.sort(key=lambda i: self.dates[i])
            n_hold = max(1, int(math.floor(fraction * len(rows) + 1e-9)))
            if n_hold >= len(rows):
                raise SplitError(f"city {city}: too few windows for a validation tail")
            fit.extend(rows[:-n_hold])
            hold.extend(rows[-n_hold:])
        return self.subset(fit), self.subset(hold)


def _check_split(panel: CityDailyPanel, split: SplitIndex) -> None:
    if len(split.layout) != len(panel.cities):
        raise SplitError(f"split covers {len(split.layout)} cities, panel has {len(panel.cities)}")
    for pos, (offset, n, n_train) in enumerate(split.layout):
        city = panel.cities[pos]
        if n != panel.n_days or offset != pos * panel.n_days:
            raise SplitError(f"split layout for {city} does not match the panel")
        rows = np.arange(offset, offset + n)
        tr = np.intersect1d(split.train, rows)
        te = np.intersect1d(split.test, rows)
        if len(tr) + len(te) != n or len(np.intersect1d(tr, te)):
            raise SplitError(f"city {city}: train and test must partition its rows")
        if len(tr) != n_train or (len(te) and len(tr) and tr.max() > te.min()):
            raise LeakageError(f"city {city}: a test day precedes a train day")


def build_sequences(
    panel: CityDailyPanel,
    target: str,
    window: int = DEFAULT_WINDOW,
    split: SplitIndex | None = None,
    standardizers: tuple[Standardizer, Standardizer] | None = None,
    fraction: float = 0.8,
) -> tuple[SequenceDataset, SequenceDataset]:
    """Sliding windows per city, split by the day of their target.

    Inputs are the nine covariates plus the lagged target over the
    ``window`` days before the target day.  A window goes to test when its
    target day is a test day; its inputs may then reach back into train
    days, which leaks no target.  Standardizers are fitted on train days
    unless supplied.
    """
    if target not in POLLUTANTS:
        raise ValueError(f"target must be one of {POLLUTANTS}")
    if window < 1:
        raise ValueError("window must be at least 1")
    if np.isnan(panel.values).any():
        raise ContractError("panel has missing values; impute it first")
    n_days = panel.n_days
    if n_days < window + 1:
        raise InsufficientDataError(f"{n_days} days cannot fill a window of {window} plus a target")
    if split is None:
        split = chronological_split(
            {c: n_days for c in panel.cities}, fraction, {c: panel.days for c in panel.cities}
        )
    _check_split(panel, split)

    names = tuple(COVARIATES) + (target,)
    data = np.stack([np.asarray(panel.variable(v)) for v in names], axis=-1)  # (city, day, feature)
    y = np.asarray(panel.variable(target))
    n_train = [lay[2] for lay in split.layout]
    if standardizers is None:
        train_rows = np.concatenate([data[c, : n_train[c]] for c in range(len(panel.cities))])
        train_y = np.concatenate([y[c, : n_train[c]] for c in range(len(panel.cities))])
        standardizers = (fit_column_stats(train_rows, names), fit_column_stats(train_y, (target,)))
    in_std, tgt_std = standardizers
    if in_std.columns != names or tgt_std.columns != (target,):
        raise ContractError("standardizers do not match the sequence features")
    xs = in_std.transform(data)
    ys = tgt_std.transform(y[..., None])[..., 0]

    parts: dict[str, dict[str, list]] = {"train": {}, "test": {}}
    for c, city in enumerate(panel.cities):
        t = np.arange(window, n_days)
        blocks = np.stack([xs[c, s - window : s] for s in t]) if len(t) else np.empty((0, window, len(names)))
        for part, mask in (("train", t < n_train[c]), ("test", t >= n_train[c])):
            acc = parts[part]
            acc.setdefault("w", []).append(blocks[mask])
            acc.setdefault("y", []).append(ys[c, t[mask]])
            acc.setdefault("prev", []).append(ys[c, t[mask] - 1])
            acc.setdefault("city", []).extend([city] * int(mask.sum()))
            acc.setdefault("date", []).append(panel.days[t[mask]])

    def assemble(acc) -> SequenceDataset:
        return SequenceDataset(
            np.concatenate(acc["w"]),
            np.concatenate(acc["y"]),
            np.concatenate(acc["prev"]),
            tuple(acc["city"]),
            np.concatenate(acc["date"]),
            names,
            target,
            in_std,
            tgt_std,
        )

    train, test = assemble(parts["train"]), assemble(parts["test"])
    for city in panel.cities:
        tr = [d for d, c in zip(train.dates, train.cities) if c == city]
        te = [d for d, c in zip(test.dates, test.cities) if c == city]
        if tr and te and min(te) <= max(tr):
            raise LeakageError(f"city {city}: a test target does not follow every train target")
    return train, test


# ------------------------------------------------------------------------ configs


def _validate_rates(rates: Sequence[float]) -> None:
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"dropout rate {r} outside [0, 1)")


@dataclass(frozen=True)
class LstmConfig:
    """Stacked LSTM; ``units[i]`` and ``dropout[i]`` describe layer ``i``."""

    units: tuple[int, ...] = (32,)
    dropout: tuple[float, ...] = (0.2,)
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "units", tuple(int(u) for u in self.units))
        object.__setattr__(self, "dropout", tuple(float(d) for d in self.dropout))
        if not self.units or len(self.units) != len(self.dropout):
            raise ValueError("need one dropout rate per LSTM layer")
        if min(self.units) < 1:
            raise ValueError("units must be positive")
        _validate_rates(self.dropout)
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("epochs, batch_size and lr must be positive")

    @property
    def layers(self) -> int:
        return len(self.units)

    @classmethod
    def from_tuner(
        cls,
        units: int,
        dropout_rate: float,
        num_layers: int,
        layer_units: Sequence[int],
        layer_dropout: Sequence[float],
        units_last: int,
        dropout_rate_last: float,
        learning_rate: float,
        **kw,
    ) -> "LstmConfig":
        """First layer, ``num_layers`` middle layers, and a last layer."""
        if len(layer_units) != num_layers or len(layer_dropout) != num_layers:
            raise ValueError("num_layers disagrees with per-layer settings")
        return cls(
            (units, *layer_units, units_last),
            (dropout_rate, *layer_dropout, dropout_rate_last),
            lr=learning_rate,
            **kw,
        )

    def to_dict(self) -> dict[str, Any]:
        return {"units": list(self.units), "dropout": list(self.dropout), "lr": self.lr,
                "epochs": self.epochs, "batch_size": self.batch_size, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LstmConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


@dataclass(frozen=True)
class PbdlConfig:
    layers: int = 1
    units: int = 107
    activation: str = "elu"
    l2: float = 0.01
    lr: float = 0.01
    epochs: int = 1000
    batch_size: int = 32
    ode_weight: float = 1.0
    seed: int = 0
    # reference variant: the rate head reads a detached trunk and its loss is only monitored
    detach_ode_head: bool = False

    def __post_init__(self):
        if self.ode_weight < 0:
            raise ValueError("ode_weight must be non-negative")
        if self.layers < 1 or self.units < 1:
            raise ValueError("need at least one dense layer with one unit")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.l2 is None:
            object.__setattr__(self, "l2", 0.0)
        if self.l2 < 0 or self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("l2 must be >= 0; epochs, batch_size and lr positive")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PbdlConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


LSTM_TABLE7 = {
    "NOx": LstmConfig.from_tuner(272, 0.4, 3, (496, 432, 208), (0.2, 0.6, 0.2), 160, 0.4, 1e-3),
    "PM25": LstmConfig.from_tuner(320, 0.4, 1, (272,), (0.4,), 48, 0.8, 1e-4),
}
PBDL_TABLE8 = PbdlConfig(layers=1, units=107, activation="elu", l2=0.01, lr=0.01, epochs=1000, batch_size=32)


# ----------------------------------------------------------------------- losses


def ode_residual_loss(rate, y_next, y_prev) -> Tensor:
    """mean((f - (y[t+1] - y[t]) / dt)^2) with dt = 1 day."""
    rate = ad.as_tensor(rate)
    diff = np.asarray(y_next, float) - np.asarray(y_prev, float)
    r = rate - diff.reshape(rate.shape)
    return (r * r).mean()


def pbdl_total_loss(data_loss, ode_loss, lam: float):
    """data + lam * ode; tensors stay differentiable, floats stay floats."""
    if lam < 0:
        raise ValueError("ode weight must be non-negative")
    for v in (data_loss, ode_loss):
        x = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(x) or x < 0:
            raise ValueError(f"losses must be finite and non-negative, got {x}")
    if isinstance(data_loss, Tensor) or isinstance(ode_loss, Tensor):
        return ad.as_tensor(data_loss) + ad.as_tensor(ode_loss) * lam
    return float(data_loss) + lam * float(ode_loss)


def _mse(pred: Tensor, y: np.ndarray) -> Tensor:
    d = pred - y.reshape(pred.shape)
    return (d * d).mean()


# ----------------------------------------------------------------------- networks


class PbdlNetwork:
    def __init__(self, config: PbdlConfig, input_dim: int, params: NetworkParams | None = None):
        self.config = config
        self.input_dim = input_dim
        self.norms: list[BatchNorm] = []
        fresh = params is None
        self.params = NetworkParams(config.seed) if fresh else params
        rng = stream(config.seed, "init")
        dims = [input_dim] + [config.units] * config.layers
        for i in range(config.layers):
            bn = BatchNorm(dims[i + 1], BN_MOMENTUM, BN_EPSILON)
            if fresh:
                self.params.add(f"dense{i}/W", he_normal_init((dims[i], dims[i + 1]), rng))
                self.params.add(f"dense{i}/b", Tensor(np.zeros(dims[i + 1]), requires_grad=True))
                self.params.add(f"bn{i}/gamma", bn.gamma)
                self.params.add(f"bn{i}/beta", bn.beta)
            else:
                bn.gamma, bn.beta = self.params.blocks[f"bn{i}/gamma"], self.params.blocks[f"bn{i}/beta"]
                bn.running_mean = self.params.buffers[f"bn{i}/mean"].copy()
                bn.running_var = self.params.buffers[f"bn{i}/var"].copy()
            self.norms.append(bn)
        if fresh:
            for head in ("pred", "rate"):
                self.params.add(f"{head}/W", he_normal_init((config.units, 1), rng))
                self.params.add(f"{head}/b", Tensor(np.zeros(1), requires_grad=True))
        self.sync_buffers()

    def sync_buffers(self) -> None:
        for i, bn in enumerate(self.norms):
            self.params.buffers[f"bn{i}/mean"] = bn.running_mean.copy()
            self.params.buffers[f"bn{i}/var"] = bn.running_var.copy()

    def kernels(self) -> list[Tensor]:
        return [t for n, t in self.params.blocks.items() if n.endswith("/W")]

    def trunk(self, x: np.ndarray, train: bool) -> Tensor:
        h = Tensor(x.reshape(len(x), -1))
        act = ACTIVATIONS[self.config.activation]
        for i, bn in enumerate(self.norms):
            p = self.params.blocks
            h = bn(act(dense(h, p[f"dense{i}/W"], p[f"dense{i}/b"])), train)
        return h

    def head(self, h: Tensor, name: str) -> Tensor:
        p = self.params.blocks
        return dense(h, p[f"{name}/W"], p[f"{name}/b"]).reshape(-1)


class LstmNetwork:
    def __init__(self, config: LstmConfig, input_dim: int, params: NetworkParams | None = None):
        self.config = config
        self.input_dim = input_dim
        fresh = params is None
        self.params = NetworkParams(config.seed) if fresh else params
        rng = stream(config.seed, "init")
        self.cells: list[LstmCellParams] = []
        dims = [input_dim] + list(config.units)
        for i in range(config.layers):
            if fresh:
                cell = init_lstm_cell(dims[i], dims[i + 1], rng)
                for name, t in cell.tensors():
                    self.params.add(f"lstm{i}/{name}", t)
            else:
                b = self.params.blocks
                cell = LstmCellParams(
                    {g: b[f"lstm{i}/W_{g}"] for g in GATES},
                    {g: b[f"lstm{i}/U_{g}"] for g in GATES},
                    {g: b[f"lstm{i}/b_{g}"] for g in GATES},
                )
            self.cells.append(cell)
        if fresh:
            self.params.add("out/W", he_normal_init((dims[-1], 1), rng))
            self.params.add("out/b", Tensor(np.zeros(1), requires_grad=True))

    def sync_buffers(self) -> None:
        pass

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        n, steps, _ = x.shape
        seq: list[Tensor] = [Tensor(x[:, s, :]) for s in range(steps)]
        for cell, rate in zip(self.cells, self.config.dropout):
            h = Tensor(np.zeros((n, cell.units)))
            c = Tensor(np.zeros((n, cell.units)))
            out = []
            for xt in seq:
                h, c = lstm_cell_step(xt, h, c, cell)
                out.append(dropout(h, rate, rng, train))
            seq = out
        p = self.params.blocks
        return dense(seq[-1], p["out/W"], p["out/b"]).reshape(-1)


# ---------------------------------------------------------------------- training


@dataclass
class LossTrace:
    """Per-epoch means over mini-batches, plus the losses before training."""

    total: list[float] = field(default_factory=list)
    data: list[float] = field(default_factory=list)
    ode: list[float] = field(default_factory=list)
    initial: dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.total)

    def append(self, total: float, data: float, ode: float) -> None:
        self.total.append(total)
        self.data.append(data)
        self.ode.append(ode)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "total", "data", "ode"))
            for i, row in enumerate(zip(self.total, self.data, self.ode), start=1):
                w.writerow((i,) + tuple(repr(float(v)) for v in row))
        return path

    def to_dict(self) -> dict[str, Any]:
        return {"total": self.total, "data": self.data, "ode": self.ode, "initial": self.initial}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LossTrace":
        return cls(list(d["total"]), list(d["data"]), list(d["ode"]), dict(d.get("initial", {})))


@dataclass(eq=False)
class TrainedModel:
    architecture: str  # "lstm" | "pbdl"
    config: LstmConfig | PbdlConfig
    network: LstmNetwork | PbdlNetwork
    input_standardizer: Standardizer
    target_standardizer: Standardizer
    trace: LossTrace
    window: int
    pollutant: str

    @property
    def params(self) -> NetworkParams:
        return self.network.params

    def to_dict(self) -> dict[str, Any]:
        meta = {
            "architecture": self.architecture,
            "config": self.config.to_dict(),
            "input_dim": self.network.input_dim,
            "input_standardizer": self.input_standardizer.to_dict(),
            "target_standardizer": self.target_standardizer.to_dict(),
            "trace": self.trace.to_dict(),
            "window": self.window,
            "pollutant": self.pollutant,
        }
        return params_to_dict(self.params, meta)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        params, meta = params_from_dict(json.loads(Path(path).read_text()))
        arch = meta["architecture"]
        if arch == "pbdl":
            config = PbdlConfig.from_dict(meta["config"])
            net = PbdlNetwork(config, meta["input_dim"], params)
        else:
            config = LstmConfig.from_dict(meta["config"])
            net = LstmNetwork(config, meta["input_dim"], params)
        return cls(
            arch,
            config,
            net,
            Standardizer.from_dict(meta["input_standardizer"]),
            Standardizer.from_dict(meta["target_standardizer"]),
            LossTrace.from_dict(meta["trace"]),
            int(meta["window"]),
            meta["pollutant"],
        )


def _pbdl_losses(net: PbdlNetwork, ds: SequenceDataset, idx, train: bool):
    """(objective tensor, total, data, ode) on rows ``idx``."""
    cfg = net.config
    y = ds.targets[idx]
    h = net.trunk(ds.windows[idx], train)
    data = _mse(net.head(h, "pred"), y)
    if cfg.detach_ode_head:
        ode = ode_residual_loss(net.head(h.detach(), "rate"), y, ds.target_prev[idx])
        objective = data
    else:
        ode = ode_residual_loss(net.head(h, "rate"), y, ds.target_prev[idx])
        objective = data + ode * cfg.ode_weight
    lam = 0.0 if cfg.detach_ode_head else cfg.ode_weight
    total = data.item() + lam * ode.item()
    return objective, total, data.item(), ode.item()


def _lstm_losses(net: LstmNetwork, ds: SequenceDataset, idx, train: bool, rng=None):
    data = _mse(net.forward(ds.windows[idx], train, rng), ds.targets[idx])
    return data, data.item(), data.item(), 0.0


def _train(net, ds: SequenceDataset, cfg, loss_fn) -> LossTrace:
    if len(ds) == 0:
        raise InsufficientDataError("no training windows")
    params = net.params.trainable()
    kernels = net.kernels() if hasattr(net, "kernels") else []
    l2 = getattr(cfg, "l2", 0.0)
    state = OptimizerState(lr=cfg.lr)
    shuffle = stream(cfg.seed, "shuffle")
    trace = LossTrace()
    everything = np.arange(len(ds))
    _, t0, d0, o0 = loss_fn(everything, False)
    trace.initial = {"total": t0, "data": d0, "ode": o0}
    n = len(ds)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            objective, total, data, ode = loss_fn(idx, True)
            if l2 > 0:
                objective = objective + l2_penalty(kernels, l2)
            if not (math.isfinite(objective.item()) and math.isfinite(ode)):
                raise DivergenceError(epoch)
            net.params.zero_grad()
            ad.backward(objective, params)
            grads = [p.grad for p in params]
            if not all(np.isfinite(g).all() for g in grads):
                raise DivergenceError(epoch)
            nadam_step(params, grads, state)
            sums += len(idx) * np.array([total, data, ode])
        means = sums / n
        if not np.isfinite(means).all() or not all(np.isfinite(p.value).all() for p in params):
            raise DivergenceError(epoch)
        trace.append(*(float(v) for v in means))
        log.debug("epoch %d total %.6g data %.6g ode %.6g", epoch, *means)
    net.sync_buffers()
    return trace


def train_pbdl(train: SequenceDataset, config: PbdlConfig) -> TrainedModel:
    """Nadam on data + lam * ode (+ L2 on kernels) over seeded mini-batches."""
    if train.target_prev is None:
        raise ContractError("PBDL training needs target_prev")
    net = PbdlNetwork(config, train.window * len(train.feature_names))
    trace = _train(net, train, config, lambda idx, tr: _pbdl_losses(net, train, idx, tr))
    return TrainedModel("pbdl", config, net, train.input_standardizer, train.target_standardizer,
                        trace, train.window, train.pollutant)


def train_lstm(train: SequenceDataset, config: LstmConfig) -> TrainedModel:
    """Mean-squared-error training of a stacked LSTM; dropout masks from a seeded stream."""
    net = LstmNetwork(config, len(train.feature_names))
    drop = stream(config.seed, "dropout")
    trace = _train(net, train, config, lambda idx, tr: _lstm_losses(net, train, idx, tr, drop))
    return TrainedModel("lstm", config, net, train.input_standardizer, train.target_standardizer,
                        trace, train.window, train.pollutant)


def _check_compatible(model: TrainedModel, data: SequenceDataset) -> None:
    if not (model.input_standardizer.matches(data.input_standardizer)
            and model.target_standardizer.matches(data.target_standardizer)):
        raise ContractError("model and data were standardized differently")
    if model.window != data.window:
        raise ContractError(f"model window {model.window} differs from data window {data.window}")


def predict_standardized(model: TrainedModel, data: SequenceDataset) -> np.ndarray:
    _check_compatible(model, data)
    if len(data) == 0:
        return np.empty(0)
    if model.architecture == "pbdl":
        return model.network.head(model.network.trunk(data.windows, False), "pred").value.copy()
    return model.network.forward(data.windows, False).value.copy()


def predict(model: TrainedModel, data: SequenceDataset) -> np.ndarray:
    """Evaluation-mode predictions on the original pollutant scale."""
    z = predict_standardized(model, data)
    return model.target_standardizer.inverse(z[:, None])[:, 0]


def ode_residual(model: TrainedModel, batch: SequenceDataset) -> float:
    """Evaluation-mode ODE loss of a PBDL model's rate head on ``batch``."""
    if batch.target_prev is None:
        raise ContractError("batch carries no target_prev")
    if model.architecture != "pbdl":
        raise ContractError("only PBDL models have a rate head")
    _check_compatible(model, batch)
    rate = model.network.head(model.network.trunk(batch.windows, False), "rate")
    return ode_residual_loss(rate, batch.targets, batch.target_prev).item()


def write_predictions(model: TrainedModel, data: SequenceDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pred = predict(model, data)
    actual = data.raw_targets()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("city", "date", "actual", "predicted"))
        for city, date, a, p in zip(data.cities, data.dates, actual, pred):
            w.writerow((city, str(date), repr(float(a)), repr(float(p))))
    return path
