"""Layer modules built on :mod:`ecgforge.nn.functional`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .errors import DimensionError
from .init import kaiming_init
from .tensor import Tensor


class Module:
    """Base class: parameter discovery, train/eval switching, call syntax.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; buffers
    (batch-norm running statistics) are numpy arrays registered in
    ``_buffers``. Child modules are attributes that are themselves modules.
    """

    training: bool = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, each in definition order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for module in self.modules():
            for key, buf in getattr(module, "_buffers", {}).items():
                module._buffers[key] = buf.astype(dtype)
        return self

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.weight = Tensor(np.zeros((out_channels, in_channels, kernel_size)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        if rng is not None:
            kaiming_init(self, rng)

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias, self.stride)

    def __repr__(self):
        return f"Conv1d({self.in_channels}, {self.out_channels}, kernel_size={self.kernel_size})"


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(np.zeros((out_features, in_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)
        if rng is not None:
            kaiming_init(self, rng)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)

    def __repr__(self):
        return f"Linear({self.in_features}, {self.out_features})"


class BatchNorm1d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self._buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}

    @property
    def running_mean(self) -> np.ndarray:
        return self._buffers["running_mean"]

    @property
    def running_var(self) -> np.ndarray:
        return self._buffers["running_var"]

    def forward(self, x):
        return F.batch_norm1d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)

    def __repr__(self):
        return f"BatchNorm1d({self.channels})"


class MaxPool1d(Module):
    def __init__(self, pool_size: int, stride: int):
        self.pool_size = pool_size
        self.stride = stride

    def forward(self, x):
        return F.max_pool1d(x, self.pool_size, self.stride)

    def __repr__(self):
        return f"MaxPool1d({self.pool_size}, stride={self.stride})"


class AdaptiveMaxPool1d(Module):
    def __init__(self, output_length: int):
        self.output_length = output_length

    def forward(self, x):
        return F.adaptive_max_pool1d(x, self.output_length)

    def __repr__(self):
        return f"AdaptiveMaxPool1d({self.output_length})"


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)

    def __repr__(self):
        return "ReLU()"


class Flatten(Module):
    def forward(self, x):
        return F.flatten(x)

    def __repr__(self):
        return "Flatten()"


class Sequential(Module):
    def __init__(self, *layers: Module):
        for i, layer in enumerate(layers):
            if not isinstance(layer, Module):
                raise DimensionError(f"layer {i} is not a Module")
            setattr(self, str(i), layer)

    def __iter__(self):
        return (m for _, m in self.children())

    def __len__(self):
        return sum(1 for _ in self.children())

    def __getitem__(self, i: int) -> Module:
        return list(self)[i]

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x

    def __repr__(self):
        inner = ", ".join(repr(m) for m in self)
        return f"Sequential({inner})"
