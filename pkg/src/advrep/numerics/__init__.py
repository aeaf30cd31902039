"""Minimal tensor engine: the layers of the auto-encoder, two losses, SGD."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .ops import (
    ConfigurationError,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    dropout,
    flatten,
    interpolate_nearest,
    leaky_relu,
    linear,
    maxpool2d,
    mse_loss,
    reshape,
    softmax,
    softmax_cross_entropy,
    tensor_sum,
)
from .optim import GROUPS, ParamSet, SgdState, sgd_step
from .tensor import ShapeError, Tensor, grad_enabled, no_grad

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConfigurationError",
    "GROUPS",
    "ParamSet",
    "SgdState",
    "ShapeError",
    "Tensor",
    "batchnorm2d",
    "conv2d",
    "conv_transpose2d",
    "dropout",
    "flatten",
    "grad_check",
    "grad_enabled",
    "interpolate_nearest",
    "leaky_relu",
    "linear",
    "load_checkpoint",
    "maxpool2d",
    "mse_loss",
    "no_grad",
    "reshape",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "softmax_cross_entropy",
    "tensor_sum",
]
