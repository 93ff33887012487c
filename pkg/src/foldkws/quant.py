"""Batch-norm folding, 8-bit fake quantization and int8 export.

Scales are per-tensor powers of two (``2**-exponent``) with a symmetric
signed range, the arithmetic a shift-based accelerator performs. Biases are
kept as int32 on the grid ``2**-(w_exp + in_exp)`` of their layer's
weight times input activation.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from .network import ConvLayer, Network, SubnetSpec, SupernetConfig
from .supernet import TrainingDiverged, make_batch
from .tensor import Adam, Tensor, no_grad, parameter, weighted_cross_entropy

INT8 = (-128, 127)
INT32 = (-(2**31), 2**31 - 1)


@dataclass(frozen=True)
class QuantParams:
    exponent: int
    bits: int = 8

    @property
    def scale(self) -> float:
        return 2.0 ** -self.exponent

    @property
    def qrange(self) -> tuple[int, int]:
        return -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1


def choose_scale(x, bits: int = 8, max_exponent: int = 15) -> QuantParams:
    """Smallest power-of-two scale that still fits max|x| into the positive range."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot choose a scale for non-finite values")
    m = float(np.abs(x).max()) if x.size else 0.0
    qmax = 2 ** (bits - 1) - 1
    if m == 0.0:
        return QuantParams(7, bits)
    s = math.floor(math.log2(qmax / m))
    while m * 2.0**s > qmax:
        s -= 1
    while m * 2.0 ** (s + 1) <= qmax:
        s += 1
    return QuantParams(int(min(max(s, 0), max_exponent)), bits)


def quantize_int(x, params: QuantParams) -> np.ndarray:
    lo, hi = params.qrange
    return np.clip(np.round(np.asarray(x, dtype=np.float64) / params.scale), lo, hi)


def fake_quantize(x: Tensor, params: QuantParams) -> Tensor:
    """``clamp(round(x / s), lo, hi) * s`` with a straight-through gradient inside the clamp range."""
    lo, hi = params.qrange
    ratio = x.data / np.asarray(params.scale, dtype=x.data.dtype)
    inside = (ratio >= lo) & (ratio <= hi)
    out = (np.clip(np.round(ratio), lo, hi) * params.scale).astype(x.data.dtype)
    return Tensor.from_op(out, (x,), lambda g: (g * inside,))


# -- batch-norm folding ---------------------------------------------------------------


def bn_fold(weight, bias, gamma, beta, mean, var, eps: float = 1e-5):
    """Fold eval-mode BN into the preceding conv; returns (weight, bias) arrays."""
    denom = np.asarray(var, dtype=np.float64) + eps
    if np.any(denom <= 0):
        raise ValueError("batch-norm variance + eps must be positive to fold")
    factor = np.asarray(gamma, dtype=np.float64) / np.sqrt(denom)
    w = np.asarray(weight, dtype=np.float64) * factor[:, None, None]
    b = (np.asarray(bias, dtype=np.float64) - mean) * factor + beta
    return w.astype(np.float32), b.astype(np.float32)


def fold_network(net: Network, eps: float = 1e-5) -> Network:
    for layer in net.layers():
        if layer.gamma is None:
            continue
        w, b = bn_fold(layer.weight.data, layer.bias.data, layer.gamma.data, layer.beta.data,
                       layer.bn.mean, layer.bn.var, eps)
        layer.weight = parameter(w)
        layer.bias = parameter(b)
        layer.gamma = layer.beta = layer.bn = None
    return net


# -- fake-quant hooks -----------------------------------------------------------------


class FakeQuant:
    """Weight and activation quantizers plugged into ``forward_layers``.

    Activation point 0 is the network input, point i+1 the ReLU output of
    conv layer i, and the last point the pooled features feeding the head.
    While calibrating, each point's scale follows the running max of |x|;
    ``freeze`` fixes the exponents.
    """

    def __init__(self, n_layers: int, act_exponents=None):
        self.n_layers = n_layers
        self.n_points = n_layers + 2
        self.act_max = np.zeros(self.n_points)
        self.act_exponents = list(act_exponents) if act_exponents is not None else [None] * self.n_points
        self.calibrating = act_exponents is None

    def input_point(self, layer_idx: int) -> int:
        return layer_idx if layer_idx < self.n_layers else self.n_layers + 1

    def activation(self, point: int, x: Tensor) -> Tensor:
        if self.calibrating:
            self.act_max[point] = max(self.act_max[point], float(np.abs(x.data).max()))
            self.act_exponents[point] = choose_scale(self.act_max[point]).exponent
        return fake_quantize(x, QuantParams(self.act_exponents[point]))

    def weight_params(self, layer_idx: int, weight) -> tuple[QuantParams, QuantParams]:
        wq = choose_scale(weight)
        bq = QuantParams(wq.exponent + self.act_exponents[self.input_point(layer_idx)], 32)
        return wq, bq

    def weights(self, layer_idx: int, layer: ConvLayer):
        wq, bq = self.weight_params(layer_idx, layer.weight.data)
        return fake_quantize(layer.weight, wq), fake_quantize(layer.bias, bq)

    def freeze(self):
        self.act_exponents = [choose_scale(m).exponent for m in self.act_max]
        self.calibrating = False


class FrozenActivations(FakeQuant):
    """Activation grid only; weights are already dequantized integers."""

    def weights(self, layer_idx, layer):
        return layer.weight, layer.bias


# -- QAT ----------------------------------------------------------------------------------


@dataclass
class QATSchedule:
    epochs: int = 200
    lr: float = 0.001
    halve_start: int = 100
    halve_every: int = 20
    n_halvings: int = 5
    qat_start: int = 150
    batch_size: int = 32
    augment: audio.AugmentSpec | None = None

    def halving_epochs(self) -> list[int]:
        return [self.halve_start + i * self.halve_every for i in range(self.n_halvings)]

    def lr_at(self, epoch: int) -> float:
        return self.lr * 0.5 ** sum(epoch >= e for e in self.halving_epochs())

    @classmethod
    def scaled(cls, epochs: int, qat_start: int, **kw) -> "QATSchedule":
        """Same shape as the 200-epoch recipe, compressed to ``epochs``."""
        ratio = epochs / 200
        return cls(epochs=epochs, halve_start=round(100 * ratio), halve_every=max(1, round(20 * ratio)),
                   qat_start=qat_start, **kw)


@dataclass
class QATEpochLog:
    epoch: int
    lr: float
    quantized: bool
    loss: float


def qat_train(net: Network, samples, labels, schedule: QATSchedule = QATSchedule(), seed: int = 0,
              class_weights=None, on_epoch=None) -> list[QATEpochLog]:
    """Fine-tune with Adam; at ``qat_start`` fold BN and switch on fake quantizers."""
    labels = np.asarray(labels)
    n = len(labels)
    weights = np.ones(net.config.n_classes, np.float32) if class_weights is None else np.asarray(class_weights)
    opt = Adam(net.parameters(), lr=schedule.lr)
    logs = []
    for epoch in range(schedule.epochs):
        if epoch == schedule.qat_start:
            fold_network(net)
            net.quant = FakeQuant(len(net.layers()))
            opt = Adam(net.parameters(), lr=schedule.lr)
        opt.lr = schedule.lr_at(epoch)
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            x = make_batch(samples, idx, schedule.augment, (seed, 1_000_003, epoch))
            opt.zero_grad()
            loss = weighted_cross_entropy(net(x, training=True), labels[idx], weights)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite QAT loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        if epoch == schedule.qat_start:
            net.quant.freeze()
        entry = QATEpochLog(epoch, opt.lr, net.quant is not None, total / max(n, 1))
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return logs


def quantize_now(net: Network, calib_batches) -> Network:
    """Fold BN and calibrate activation scales on data without training."""
    fold_network(net)
    net.quant = FakeQuant(len(net.layers()))
    with no_grad():
        for x in calib_batches:
            net(x)
    net.quant.freeze()
    return net


# -- int8 model ----------------------------------------------------------------------------

QMODEL_MAGIC = b"KWSQ0001"


@dataclass
class QuantizedModel:
    descriptor: dict
    w_exponents: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    _net: Network | None = field(default=None, repr=False, compare=False)

    @property
    def act_exponents(self) -> list[int]:
        return self.descriptor["act_exponents"]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def size_bytes_int8(self) -> int:
        """One byte per parameter, the accounting used for int8 model size."""
        return self.param_count()

    def bias_exponent(self, i: int) -> int:
        n = len(self.weights) - 1
        point = i if i < n else n + 1
        return self.w_exponents[i] + self.act_exponents[point]

    def to_network(self) -> Network:
        if self._net is not None:
            return self._net
        config = SupernetConfig.from_dict(self.descriptor["config"])
        spec = SubnetSpec.from_dict(self.descriptor["spec"])
        deq = [
            (Tensor(q.astype(np.float32) * np.float32(2.0 ** -self.w_exponents[i])),
             Tensor((b.astype(np.float64) * 2.0 ** -self.bias_exponent(i)).astype(np.float32)))
            for i, (q, b) in enumerate(zip(self.weights, self.biases))
        ]
        units, k = [], 0
        for d in spec.depths:
            units.append([ConvLayer(*deq[k + j]) for j in range(d)])
            k += d
        head_w, head_b = deq[-1]
        self._net = Network(config, spec, units, head_w, head_b,
                            quant=FrozenActivations(k, self.act_exponents))
        return self._net

    def __call__(self, x, training: bool = False) -> Tensor:
        with no_grad():
            return self.to_network()(x)

    def to_bytes(self) -> bytes:
        block = json.dumps(self.descriptor, sort_keys=True).encode()
        body = bytearray(QMODEL_MAGIC)
        body += struct.pack("<I", len(block)) + block
        for e, w, b in zip(self.w_exponents, self.weights, self.biases):
            body += struct.pack("<b", e)
            body += np.ascontiguousarray(w, dtype=np.int8).tobytes()
            body += np.ascontiguousarray(b, dtype="<i4").tobytes()
        body += struct.pack("<I", zlib.crc32(bytes(body)))
        return bytes(body)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "QuantizedModel":
        if raw[:8] != QMODEL_MAGIC:
            raise ValueError("not a KWSQ0001 quantized model")
        (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if zlib.crc32(raw[:-4]) != crc:
            raise ValueError("quantized model CRC mismatch")
        (n,) = struct.unpack_from("<I", raw, 8)
        desc = json.loads(raw[12 : 12 + n])
        pos = 12 + n
        exps, ws, bs = [], [], []
        for shape in desc["layer_shapes"]:
            (e,) = struct.unpack_from("<b", raw, pos)
            pos += 1
            size = int(np.prod(shape))
            ws.append(np.frombuffer(raw, np.int8, size, pos).reshape(shape).copy())
            pos += size
            bs.append(np.frombuffer(raw, "<i4", shape[0], pos).astype(np.int32))
            pos += 4 * shape[0]
            exps.append(e)
        return cls(desc, exps, ws, bs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "QuantizedModel":
        return cls.from_bytes(Path(path).read_bytes())


def export_int8(net: Network, config_hash: str | None = None) -> QuantizedModel:
    quant = net.quant
    if not isinstance(quant, FakeQuant) or not net.folded:
        raise ValueError("export_int8 needs a BN-folded network with quantizers attached (run QAT first)")
    if quant.calibrating:
        raise ValueError("activation scales are still calibrating; freeze them before export")
    layers = net.layers() + [ConvLayer(net.head_w, net.head_b)]
    exps, ws, bs = [], [], []
    for i, layer in enumerate(layers):
        wq, bq = quant.weight_params(i, layer.weight.data)
        exps.append(wq.exponent)
        ws.append(quantize_int(layer.weight.data, wq).astype(np.int8))
        bs.append(quantize_int(layer.bias.data, bq).astype(np.int32))
    desc = {
        "config": net.config.to_dict(),
        "spec": net.spec.to_dict(),
        "act_exponents": [int(e) for e in quant.act_exponents],
        "layer_shapes": [list(w.shape) for w in ws],
        "config_hash": config_hash or net.config.digest(),
    }
    return QuantizedModel(desc, exps, ws, bs)
