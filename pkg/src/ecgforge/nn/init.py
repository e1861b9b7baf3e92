"""Weight initialisation."""

from __future__ import annotations

import math

import numpy as np

RELU_GAIN = math.sqrt(2.0)


def kaiming_std(fan_in: int, gain: float = RELU_GAIN) -> float:
    return gain / math.sqrt(fan_in)


def kaiming_init(layer, rng: np.random.Generator) -> None:
    """Kaiming-normal weights (fan-in mode, ReLU gain) and zero biases, in place.

    ``fan_in`` is ``in_channels * kernel_size`` for convolutions and
    ``in_features`` for linear layers.
    """
    w = layer.weight.data
    fan_in = int(np.prod(w.shape[1:]))
    w[...] = rng.normal(0.0, kaiming_std(fan_in), size=w.shape)
    if layer.bias is not None:
        layer.bias.data[...] = 0.0
