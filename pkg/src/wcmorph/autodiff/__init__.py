"""Minimal reverse-mode autodiff over float64 numpy arrays."""

from .gradcheck import gradient_check
from .nn import BatchNorm, Conv2d, Linear, Module, UntiedBias, frozen
from .ops import (
    angle,
    batch_norm,
    concat,
    conv2d,
    cross_entropy,
    fully_connected,
    l2_normalize,
    leaky_relu,
    mse_loss,
    sigmoid,
    transpose,
    upsample_nearest,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, backward, matmul
from .weights import ModelWeights

__all__ = [
    "Adam",
    "AdamState",
    "BatchNorm",
    "Conv2d",
    "Linear",
    "ModelWeights",
    "Module",
    "Tensor",
    "UntiedBias",
    "adam_step",
    "angle",
    "backward",
    "batch_norm",
    "concat",
    "conv2d",
    "cross_entropy",
    "frozen",
    "fully_connected",
    "gradient_check",
    "l2_normalize",
    "leaky_relu",
    "matmul",
    "mse_loss",
    "sigmoid",
    "transpose",
    "upsample_nearest",
]
