"""The 7-block 1-D CNN with interchangeable regression/classification heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .nn import functional as F
from .nn.errors import GeometryError

HEAD_OUTPUTS = {"regression": 100, "classification": 17}


class StructuralError(ValueError):
    """The network is not one built by :func:`build_network`."""


@dataclass(frozen=True)
class EcgNetConfig:
    n_conv_layers: int = 7
    first_kernel: int = 128
    min_kernel: int = 2
    first_channels: int = 16
    max_channels: int = 128
    pool_size: int = 4
    pool_stride: int = 2
    batchnorm: bool = True
    adaptive_output_length: int = 1000
    head: str = "regression"
    n_head_layers: int = 1
    residual_to_head: bool = False
    input_length: int = 3600

    def __post_init__(self):
        if self.head not in HEAD_OUTPUTS:
            raise ValueError(f"head must be one of {sorted(HEAD_OUTPUTS)}")
        if self.n_conv_layers < 1 or self.n_head_layers < 1:
            raise ValueError("need at least one conv layer and one head layer")

    @property
    def kernel_sizes(self) -> list[int]:
        return [max(self.min_kernel, self.first_kernel >> i) for i in range(self.n_conv_layers)]

    @property
    def channels(self) -> list[int]:
        return [min(self.max_channels, self.first_channels << i) for i in range(self.n_conv_layers)]

    @property
    def out_features(self) -> int:
        return HEAD_OUTPUTS[self.head]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EcgNetConfig":
        return cls(**d)


def shape_chain(config: EcgNetConfig, input_length: int | None = None) -> list[tuple[int, int]]:
    """(post-conv, post-pool) length of every block, failing on the first bad stage."""
    length = config.input_length if input_length is None else input_length
    chain = []
    for stage, kernel in enumerate(config.kernel_sizes, start=1):
        conv_len = length - kernel + 1
        if conv_len < 1:
            raise GeometryError(f"stage {stage}: conv kernel {kernel} exceeds length {length}")
        if conv_len < config.pool_size:
            raise GeometryError(
                f"stage {stage}: pool size {config.pool_size} exceeds conv output length {conv_len}"
            )
        pool_len = (conv_len - config.pool_size) // config.pool_stride + 1
        chain.append((conv_len, pool_len))
        length = pool_len
    return chain


class ConvBlock(nn.Module):
    """conv -> ReLU -> batch norm -> max pool."""

    def __init__(self, in_ch, out_ch, kernel, pool_size, pool_stride, batchnorm, rng):
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, rng=rng)
        self.relu = nn.ReLU()
        if batchnorm:
            self.bn = nn.BatchNorm1d(out_ch)
        self.pool = nn.MaxPool1d(pool_size, pool_stride)

    def forward(self, x):
        x = self.relu(self.conv(x))
        if hasattr(self, "bn"):
            x = self.bn(x)
        return self.pool(x)


def make_head(config: EcgNetConfig, rng: np.random.Generator) -> nn.Sequential:
    width = config.adaptive_output_length
    layers: list[nn.Module] = []
    if config.head == "classification":
        for _ in range(config.n_head_layers - 1):
            layers += [nn.Linear(width, width, rng=rng), nn.ReLU()]
    layers.append(nn.Linear(width, config.out_features, rng=rng))
    return nn.Sequential(*layers)


class EcgNet(nn.Module):
    """Trunk of conv blocks, flatten, adaptive max pool, linear head.

    With ``residual_to_head`` every earlier block's flattened output is also
    adaptive-max-pooled to the head width and summed into the head input.
    """

    def __init__(self, config: EcgNetConfig, rng: np.random.Generator):
        chain = shape_chain(config)
        channels = config.channels
        flat = channels[-1] * chain[-1][1]
        if flat < config.adaptive_output_length:
            raise GeometryError(
                f"flattened width {flat} is smaller than adaptive output {config.adaptive_output_length}"
            )
        self.config = config
        in_ch = 1
        blocks = []
        for out_ch, kernel in zip(channels, config.kernel_sizes):
            blocks.append(ConvBlock(in_ch, out_ch, kernel, config.pool_size, config.pool_stride,
                                    config.batchnorm, rng))
            in_ch = out_ch
        self.trunk = nn.Sequential(*blocks)
        self.flatten = nn.Flatten()
        self.amp = nn.AdaptiveMaxPool1d(config.adaptive_output_length)
        self.head = make_head(config, rng)

    @property
    def flat_features(self) -> int:
        return self.config.channels[-1] * shape_chain(self.config)[-1][1]

    def features(self, x: nn.Tensor) -> nn.Tensor:
        skips = []
        for block in self.trunk:
            x = block(x)
            skips.append(x)
        pooled = self.amp(self.flatten(x))
        if self.config.residual_to_head:
            for s in skips[:-1]:
                pooled = F.add(pooled, self.amp(self.flatten(s)))
        return pooled

    def forward(self, x):
        if x.data.ndim == 2:
            x = F.reshape(x, (x.shape[0], 1, x.shape[1]))
        return self.head(self.features(x))

    def trunk_state(self) -> list[tuple[str, np.ndarray]]:
        return [(n, a) for n, a in self.state() if n.startswith("trunk.")]

    def trunk_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in self.trunk_state())

    def architecture(self) -> dict:
        return self.config.to_dict()

    def __repr__(self):
        return f"EcgNet({self.config})"


def build_network(config: EcgNetConfig | None = None, rng: np.random.Generator | int = 0) -> EcgNet:
    """Kaiming-initialised network for ``config`` (default: the 7-block regression net)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return EcgNet(config or EcgNetConfig(), rng)


def swap_head(network: EcgNet, head: str, rng: np.random.Generator | int = 0) -> EcgNet:
    """Replace the head with a freshly initialised one; the trunk is kept as is."""
    if not isinstance(network, EcgNet) or not hasattr(network, "trunk"):
        raise StructuralError("swap_head needs a network built by build_network")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    network.config = replace(network.config, head=head)
    dtype = network.trunk[0].conv.weight.dtype
    network.head = make_head(network.config, rng).astype(dtype)
    network.head.train(network.training)
    return network


def save_network(network: EcgNet, path) -> None:
    nn.checkpoint.save(network, path, network.architecture())


def load_network(path, dtype=np.float64) -> EcgNet:
    """Rebuild the network from the checkpoint's own architecture record."""
    blob = open(path, "rb").read()
    manifest, _ = nn.checkpoint.parse(blob)
    config = EcgNetConfig.from_dict(manifest["architecture"])
    network = build_network(config, 0).astype(dtype)
    nn.checkpoint.loads(network, blob, network.architecture())
    return network
