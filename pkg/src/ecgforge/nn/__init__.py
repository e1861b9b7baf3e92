"""Minimal 1-D CNN toolkit: tensors with reverse-mode autodiff, layers, losses, Adam."""

from . import checkpoint, functional
from .errors import DegenerateStatisticsError, DimensionError, GeometryError, NumericError
from .functional import cross_entropy, smooth_l1_loss, softmax
from .gradcheck import gradient_check
from .init import kaiming_init
from .layers import (
    AdaptiveMaxPool1d,
    BatchNorm1d,
    Conv1d,
    Flatten,
    Linear,
    MaxPool1d,
    Module,
    ReLU,
    Sequential,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "AdaptiveMaxPool1d",
    "BatchNorm1d",
    "Conv1d",
    "DegenerateStatisticsError",
    "DimensionError",
    "Flatten",
    "GeometryError",
    "Linear",
    "MaxPool1d",
    "Module",
    "NumericError",
    "ReLU",
    "Sequential",
    "Tensor",
    "adam_step",
    "checkpoint",
    "cross_entropy",
    "functional",
    "gradient_check",
    "kaiming_init",
    "no_grad",
    "smooth_l1_loss",
    "softmax",
]
