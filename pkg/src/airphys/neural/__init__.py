"""Minimal reverse-mode autodiff with the layers the forecasters need."""
from .autodiff import Tensor, as_tensor, backward, concat, elu, exp, log, sigmoid, tanh
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .layers import (
    BN_EPSILON,
    BN_MOMENTUM,
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
from .optim import OptimizerState, nadam_step

__all__ = [
    "BN_EPSILON",
    "BN_MOMENTUM",
    "BatchNorm",
    "LstmCellParams",
    "MAGIC",
    "NetworkParams",
    "OptimizerState",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "dense",
    "dropout",
    "elu",
    "exp",
    "he_normal_init",
    "init_lstm_cell",
    "l2_penalty",
    "load_checkpoint",
    "log",
    "lstm_cell_step",
    "nadam_step",
    "save_checkpoint",
    "sigmoid",
    "tanh",
]
