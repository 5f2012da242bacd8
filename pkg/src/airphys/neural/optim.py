"""Nadam (Adam with Nesterov momentum and a warming momentum schedule)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .autodiff import Tensor

SCHEDULE_DECAY = 0.96


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    step: int = 0
    u_product: float = 1.0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def momentum_at(beta1: float, t: int) -> float:
    """u_t = beta1 (1 - 0.5 * 0.96^(0.004 t))."""
    return beta1 * (1.0 - 0.5 * SCHEDULE_DECAY ** (0.004 * t))


def nadam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place and advance ``state``.

    m_hat = u_{t+1} m / (1 - prod u_1..u_{t+1}) + (1 - u_t) g / (1 - prod u_1..u_t)
    v_hat = v / (1 - beta2^t)
    w    -= lr m_hat / (sqrt(v_hat) + eps)
    """
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise ShapeError("optimizer state, parameters and gradients disagree in count")
    t = state.step + 1
    u_t = momentum_at(state.beta1, t)
    u_next = momentum_at(state.beta1, t + 1)
    prod_t = state.u_product * u_t
    prod_next = prod_t * u_next
    b2_corr = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = u_next * m / (1.0 - prod_next) + (1.0 - u_t) * g / (1.0 - prod_t)
        v_hat = v / b2_corr
        p.value = p.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    state.u_product = prod_t
    return state
