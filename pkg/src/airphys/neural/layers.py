"""Layer ops: initialization, dense, dropout, batch norm, L2 penalty, LSTM cell."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..errors import ShapeError
from . import autodiff as ad
from .autodiff import Tensor

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3


def he_normal_init(shape: tuple[int, ...], rng: np.random.Generator | int) -> Tensor:
    """Normal(0, 2 / fan_in) entries; ``fan_in`` is the first axis."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    shape = tuple(int(s) for s in shape)
    if 0 in shape:
        return Tensor(np.zeros(shape), requires_grad=True)
    fan_in = shape[0]
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def orthogonal_init(n: int, rng: np.random.Generator) -> Tensor:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return Tensor(q * np.sign(np.diag(r)), requires_grad=True)


def dense(x, W: Tensor, b: Tensor) -> Tensor:
    x = ad.as_tensor(x)
    if x.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"dense input {x.shape} does not match weights {W.shape}")
    return x @ W + b


ACTIVATIONS = {"elu": ad.elu, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "linear": lambda t: t}


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: surviving units are scaled by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = ad.as_tensor(x)
    if not train or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate))


class BatchNorm:
    """Per-feature normalization with learned scale and shift.

    Train mode uses batch mean and (biased) variance and folds them into
    the running statistics; eval mode uses the running statistics.
    """

    def __init__(self, features: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPSILON):
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, train: bool) -> Tensor:
        x = ad.as_tensor(x)
        if x.value.ndim != 2 or x.shape[1] != len(self.running_mean):
            raise ShapeError(f"batch norm over {len(self.running_mean)} features got {x.shape}")
        if train:
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            xhat = centered * (var + self.eps) ** -0.5
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.value[0]
            self.running_var = m * self.running_var + (1 - m) * var.value[0]
        else:
            xhat = (x - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))
        return xhat * self.gamma + self.beta


def l2_penalty(weights, lam: float) -> Tensor:
    """lam * sum of squared entries over all given weight tensors."""
    total = Tensor(0.0)
    for w in weights:
        total = total + (w * w).sum()
    return total * lam


GATES = ("i", "f", "o", "g")


@dataclass
class LstmCellParams:
    """Input (W), recurrent (U) and bias (b) blocks for the four gates."""

    W: dict[str, Tensor]
    U: dict[str, Tensor]
    b: dict[str, Tensor]

    def __post_init__(self):
        if set(self.W) != set(GATES) or set(self.U) != set(GATES) or set(self.b) != set(GATES):
            raise ShapeError("LSTM parameters need i, f, o, g blocks")
        units = self.U["i"].shape[0]
        inputs = self.W["i"].shape[0]
        for gate in GATES:
            if self.U[gate].shape != (units, units):
                raise ShapeError(f"recurrent block {gate} must be {units}x{units}")
            if self.W[gate].shape != (inputs, units) or self.b[gate].shape != (units,):
                raise ShapeError(f"gate {gate} blocks disagree on sizes")

    @property
    def units(self) -> int:
        return self.U["i"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.W["i"].shape[0]

    def tensors(self) -> Iterator[tuple[str, Tensor]]:
        for gate in GATES:
            yield f"W_{gate}", self.W[gate]
            yield f"U_{gate}", self.U[gate]
            yield f"b_{gate}", self.b[gate]

    @classmethod
    def from_arrays(cls, W, U, b) -> "LstmCellParams":
        """Build from per-gate arrays; scalars are accepted for a 1-unit cell."""
        out_W, out_U, out_b = {}, {}, {}
        for g in GATES:
            bias = np.atleast_1d(np.asarray(b[g], float))
            units = len(bias)
            out_b[g] = Tensor(bias, requires_grad=True)
            u = np.asarray(U[g], float)
            w = np.asarray(W[g], float)
            if u.size != units * units or w.size % units:
                raise ShapeError(f"gate {g}: {units} units cannot take U of size {u.size}, W of size {w.size}")
            out_U[g] = Tensor(u.reshape(units, units), requires_grad=True)
            out_W[g] = Tensor(w.reshape(-1, units), requires_grad=True)
        return cls(out_W, out_U, out_b)


def init_lstm_cell(input_dim: int, units: int, rng: np.random.Generator) -> LstmCellParams:
    """He-normal input kernels, orthogonal recurrent kernels, forget bias 1."""
    W = {g: he_normal_init((input_dim, units), rng) for g in GATES}
    U = {g: orthogonal_init(units, rng) for g in GATES}
    b = {g: Tensor(np.full(units, 1.0 if g == "f" else 0.0), requires_grad=True) for g in GATES}
    return LstmCellParams(W, U, b)


def lstm_cell_step(x, h, c, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM step on a batch (rows) or a single vector.

    i, f, o = sigmoid(x W + h U + b); g = tanh(x W_g + h U_g + b_g);
    c' = f c + i g; h' = o tanh(c').
    """
    x, h, c = ad.as_tensor(x), ad.as_tensor(h), ad.as_tensor(c)
    single = x.value.ndim == 1
    if single:
        x, h, c = x.reshape(1, -1), h.reshape(1, -1), c.reshape(1, -1)
    if x.shape[1] != p.input_dim or h.shape[1] != p.units or c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise ShapeError(f"LSTM step got x{x.shape}, h{h.shape}, c{c.shape} for {p.input_dim}->{p.units}")
    pre = {g: x @ p.W[g] + h @ p.U[g] + p.b[g] for g in GATES}
    i, f, o = ad.sigmoid(pre["i"]), ad.sigmoid(pre["f"]), ad.sigmoid(pre["o"])
    g = ad.tanh(pre["g"])
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if single:
        return h_new.reshape(-1), c_new.reshape(-1)
    return h_new, c_new


class NetworkParams:
    """Named parameter blocks in insertion order plus non-trainable buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.blocks: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.blocks:
            raise ValueError(f"duplicate parameter block {name}")
        self.blocks[name] = t
        return t

    def trainable(self) -> list[Tensor]:
        return list(self.blocks.values())

    def zero_grad(self) -> None:
        for t in self.blocks.values():
            t.grad = None

    def __len__(self) -> int:
        return len(self.blocks)
