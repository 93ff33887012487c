"""MAC, parameter and byte accounting for subnets and the MFCC front end."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mfcc import MfccConfig, mel_weights
from .network import SubnetSpec, SupernetConfig

SUPPORTED_OPS = frozenset({
    "conv1d", "conv2d", "conv_transpose2d", "linear", "maxpool1d", "avgpool1d", "global_avgpool1d",
    "add", "sub", "or", "xor", "relu", "batchnorm",
})


def spec_layers(spec: SubnetSpec, config: SupernetConfig) -> list[dict]:
    """Flat layer descriptors for an active subnet, in execution order."""
    spec.validate(config)
    out = []
    lengths = config.unit_lengths()
    c_in = config.in_channels
    for u, d in enumerate(spec.depths):
        for j in range(d):
            k, w = spec.kernels[u][j], spec.widths[u][j]
            out.append({"op": "conv1d", "unit": u, "c_in": c_in, "c_out": w, "kernel": k,
                        "l_out": lengths[u], "bn": True})
            out.append({"op": "relu", "channels": w, "l_out": lengths[u]})
            c_in = w
        if u < config.n_units - 1:
            out.append({"op": "maxpool1d", "channels": c_in, "kernel": 2, "l_out": lengths[u] // 2})
    out.append({"op": "global_avgpool1d", "channels": c_in, "l_in": lengths[-1]})
    out.append({"op": "linear", "in": c_in, "out": config.n_classes})
    return out


def layer_macs(layer: dict) -> int:
    if layer["op"] == "conv1d":
        return layer["c_in"] * layer["c_out"] * layer["kernel"] * layer["l_out"]
    if layer["op"] == "linear":
        return layer["in"] * layer["out"]
    return 0


def layer_params(layer: dict, include_bn: bool = True) -> int:
    if layer["op"] == "conv1d":
        n = layer["c_out"] * layer["c_in"] * layer["kernel"] + layer["c_out"]
        return n + (2 * layer["c_out"] if include_bn and layer.get("bn") else 0)
    if layer["op"] == "linear":
        return layer["in"] * layer["out"] + layer["out"]
    return 0


def total_macs(spec: SubnetSpec, config: SupernetConfig) -> int:
    return sum(layer_macs(layer) for layer in spec_layers(spec, config))


def param_count(spec: SubnetSpec, config: SupernetConfig, include_bn: bool = True) -> int:
    """Weights + biases, plus BN gamma/beta unless counting a folded model."""
    return sum(layer_params(layer, include_bn) for layer in spec_layers(spec, config))


@dataclass(frozen=True)
class Cost:
    param_count: int
    param_bytes: int
    macs: int


def spec_cost(spec: SubnetSpec, config: SupernetConfig, bits: int = 8, include_bn: bool = True) -> Cost:
    n = param_count(spec, config, include_bn)
    return Cost(n, bytes_for(n, bits), total_macs(spec, config))


def bytes_for(n_params: int, bits: int = 8) -> int:
    return -(-n_params * bits // 8)


def kilobytes(n_bytes: int) -> float:
    """Decimal kilobytes, the convention behind "419.8 KB" for 419.8K int8 params."""
    return n_bytes / 1000.0


def mfcc_macs(config: MfccConfig = MfccConfig(), n_samples: int = 16000) -> dict:
    """Per-stage multiply counts of the MFCC front end for one clip."""
    frames = config.n_frames(n_samples)
    half = config.n_fft // 2
    log2n = int(np.log2(config.n_fft))
    butterflies = frames * half * log2n
    support = int(np.count_nonzero(mel_weights(config)))
    stages = {
        "n_frames": frames,
        "window": frames * config.frame_len,
        "fft_butterflies": butterflies,
        "fft": 4 * butterflies,
        "power": frames * (half + 1) * 2,
        "mel": frames * support,
        "dct": frames * config.n_mels * config.n_mfcc,
    }
    stages["total"] = sum(stages[k] for k in ("window", "fft", "power", "mel", "dct"))
    return stages


def check_capabilities(layers, max_width: int = 128, kernel_sizes=(1, 3, 5)) -> list[str]:
    """Violations of the accelerator's op set and configured limits (empty list = ok)."""
    problems = []
    for i, layer in enumerate(layers):
        op = layer.get("op")
        if op not in SUPPORTED_OPS:
            problems.append(f"layer {i}: unsupported op {op!r}")
            continue
        for key in ("c_in", "c_out", "channels", "in"):
            if key in layer and layer[key] > max_width and not (i == 0 and key == "c_in"):
                problems.append(f"layer {i}: {key}={layer[key]} exceeds max width {max_width}")
        if op == "conv1d" and layer["kernel"] not in kernel_sizes:
            problems.append(f"layer {i}: kernel {layer['kernel']} not in {tuple(kernel_sizes)}")
    return problems


def cost_report(spec: SubnetSpec, config: SupernetConfig, mfcc_config: MfccConfig = MfccConfig()) -> dict:
    layers = spec_layers(spec, config)
    per_layer = [
        {**layer, "macs": layer_macs(layer), "params": layer_params(layer)}
        for layer in layers
    ]
    folded = param_count(spec, config, include_bn=False)
    return {
        "per_layer": per_layer,
        "total_macs": total_macs(spec, config),
        "param_count": param_count(spec, config),
        "param_count_folded": folded,
        "param_bytes_int8": bytes_for(folded, 8),
        "capability_violations": check_capabilities(layers, config.max_width, config.kernel_choices),
        "mfcc": mfcc_macs(mfcc_config),
    }
