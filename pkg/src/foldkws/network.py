"""Dense Conv1D keyword-spotting network and the architecture genome.

Topology: units of (conv -> BN -> ReLU) layers, 2x max-pool between units,
global average pool after the last unit, then a linear classifier. The same
forward routine runs sliced supernet views and standalone extracted nets.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import BatchNormState, Tensor, batchnorm1d, conv1d, global_avgpool1d, linear, maxpool1d, relu

STAGES = ("full", "elastic_kernel", "elastic_depth", "elastic_width")


@dataclass(frozen=True)
class SupernetConfig:
    unit_max_depths: tuple[int, ...] = (3, 3, 2, 2, 2, 2)
    max_width: int = 128
    max_kernel: int = 5
    kernel_choices: tuple[int, ...] = (1, 3, 5)
    width_choices: tuple[int, ...] = (32, 64, 96, 128)
    n_classes: int = 12
    in_channels: int = 128
    input_length: int = 128

    def __post_init__(self):
        object.__setattr__(self, "unit_max_depths", tuple(self.unit_max_depths))
        object.__setattr__(self, "kernel_choices", tuple(self.kernel_choices))
        object.__setattr__(self, "width_choices", tuple(self.width_choices))
        if not self.unit_max_depths or min(self.unit_max_depths) < 1:
            raise ValueError("every unit needs at least one layer")
        for name in ("kernel_choices", "width_choices"):
            ch = getattr(self, name)
            if list(ch) != sorted(set(ch)) or ch[0] < 1:
                raise ValueError(f"{name} must be strictly ascending positive values")
        if self.kernel_choices[-1] != self.max_kernel:
            raise ValueError("largest kernel choice must equal max_kernel")
        if self.width_choices[-1] != self.max_width:
            raise ValueError("largest width choice must equal max_width")
        if any(k % 2 == 0 for k in self.kernel_choices):
            raise ValueError("kernel sizes must be odd")
        if self.input_length % (2 ** (len(self.unit_max_depths) - 1)):
            raise ValueError("input_length must survive the 2x pools between units")

    @property
    def n_layers(self) -> int:
        return sum(self.unit_max_depths)

    @property
    def n_units(self) -> int:
        return len(self.unit_max_depths)

    def unit_offsets(self) -> list[int]:
        return list(np.cumsum((0,) + self.unit_max_depths[:-1]))

    def unit_lengths(self) -> list[int]:
        return [self.input_length >> u for u in range(self.n_units)]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SubnetSpec:
    """Per-unit depth plus kernel/width for each active layer of each unit."""

    depths: tuple[int, ...]
    kernels: tuple[tuple[int, ...], ...]
    widths: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "kernels", tuple(tuple(int(k) for k in u) for u in self.kernels))
        object.__setattr__(self, "widths", tuple(tuple(int(w) for w in u) for u in self.widths))

    @classmethod
    def maximal(cls, config: SupernetConfig) -> "SubnetSpec":
        d = config.unit_max_depths
        return cls(d, tuple((config.max_kernel,) * n for n in d), tuple((config.max_width,) * n for n in d))

    def validate(self, config: SupernetConfig) -> None:
        if len(self.depths) != config.n_units:
            raise ValueError(f"spec has {len(self.depths)} units, config has {config.n_units}")
        for u, d in enumerate(self.depths):
            if not 1 <= d <= config.unit_max_depths[u]:
                raise ValueError(f"unit {u}: depth {d} outside 1..{config.unit_max_depths[u]}")
            if len(self.kernels[u]) != d or len(self.widths[u]) != d:
                raise ValueError(f"unit {u}: gene lists must have exactly {d} entries")
            for k in self.kernels[u]:
                if k not in config.kernel_choices:
                    raise ValueError(f"unit {u}: kernel {k} not in {config.kernel_choices}")
            for w in self.widths[u]:
                if w not in config.width_choices:
                    raise ValueError(f"unit {u}: width {w} not in {config.width_choices}")

    def layers(self, config: SupernetConfig):
        """Yield (unit, depth index, supernet layer index, kernel, width) for active layers."""
        offsets = config.unit_offsets()
        for u, d in enumerate(self.depths):
            for j in range(d):
                yield u, j, offsets[u] + j, self.kernels[u][j], self.widths[u][j]

    @property
    def last_width(self) -> int:
        return self.widths[-1][-1]

    def to_dict(self) -> dict:
        return {"depths": list(self.depths), "kernels": [list(k) for k in self.kernels],
                "widths": [list(w) for w in self.widths]}

    @classmethod
    def from_dict(cls, d: dict) -> "SubnetSpec":
        return cls(d["depths"], d["kernels"], d["widths"])

    def key(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BatchNormState | None = None

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def params(self) -> list[Tensor]:
        return [p for p in (self.weight, self.bias, self.gamma, self.beta) if p is not None]


def forward_layers(units, head_w: Tensor, head_b: Tensor, x, training: bool, quant=None) -> Tensor:
    """Run ``units`` (lists of ConvLayer) on a (N, C, L) batch (or one (C, L) grid) and return logits.

    ``quant``, when given, supplies ``weights(i, layer)`` returning the
    (weight, bias) to use for layer i, and ``activation(point, x)`` applied to
    the network input (point 0), each ReLU output, and the pooled features.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    point = 0
    if quant is not None:
        x = quant.activation(point, x)
    idx = 0
    for u, layers in enumerate(units):
        for layer in layers:
            w, b = (layer.weight, layer.bias) if quant is None else quant.weights(idx, layer)
            x = conv1d(x, w, b, padding=(w.shape[2] - 1) // 2)
            if layer.gamma is not None:
                x = batchnorm1d(x, layer.gamma, layer.beta, layer.bn, training)
            x = relu(x)
            idx += 1
            point += 1
            if quant is not None:
                x = quant.activation(point, x)
        if u < len(units) - 1:
            x = maxpool1d(x, 2, 2)
    x = global_avgpool1d(x)
    if quant is not None:
        x = quant.activation(point + 1, x)
        head_w, head_b = quant.weights(idx, ConvLayer(head_w, head_b))
    out = linear(x, head_w, head_b)
    return out.reshape(out.shape[1]) if squeeze else out


@dataclass
class Network:
    """A standalone (extracted) subnet with its own dense parameters."""

    config: SupernetConfig
    spec: SubnetSpec
    units: list[list[ConvLayer]]
    head_w: Tensor
    head_b: Tensor
    quant: object | None = None
    meta: dict = field(default_factory=dict)

    def layers(self) -> list[ConvLayer]:
        return [layer for unit in self.units for layer in unit]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.params()] + [self.head_w, self.head_b]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def folded(self) -> bool:
        return all(layer.gamma is None for layer in self.layers())

    def __call__(self, x, training: bool = False) -> Tensor:
        return forward_layers(self.units, self.head_w, self.head_b, x, training, self.quant)


def kaiming(rng, shape, fan_in) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
