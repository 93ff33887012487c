"""Elastic Conv1D supernet: sampling, sliced forward, extraction, training.

Progressive shrinking unlocks elastic kernels, then depths, then widths.
Smaller kernels take the center taps of the 5-tap kernel, shallower units
drop layers from the end, and narrower layers take the leading channels
after importance sorting. Every subnet reads and writes the same storage.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from .network import STAGES, ConvLayer, Network, SubnetSpec, SupernetConfig, forward_layers, kaiming
from .tensor import SGD, BatchNormState, Tensor, log_softmax, no_grad, parameter, weighted_cross_entropy

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Supernet:
    def __init__(self, config: SupernetConfig = SupernetConfig(), seed: int = 0):
        self.config = config
        self.stage = "full"
        rng = np.random.default_rng(seed)
        c, k = config.max_width, config.max_kernel
        self.weights, self.biases, self.gammas, self.betas = [], [], [], []
        self.run_mean, self.run_var, self.channel_order = [], [], []
        for i in range(config.n_layers):
            c_in = config.in_channels if i == 0 else c
            self.weights.append(parameter(kaiming(rng, (c, c_in, k), c_in * k), f"conv{i}.weight"))
            self.biases.append(parameter(np.zeros(c, np.float32), f"conv{i}.bias"))
            self.gammas.append(parameter(np.ones(c, np.float32), f"bn{i}.gamma"))
            self.betas.append(parameter(np.zeros(c, np.float32), f"bn{i}.beta"))
            self.run_mean.append(np.zeros(c, np.float32))
            self.run_var.append(np.ones(c, np.float32))
            self.channel_order.append(np.arange(c))
        bound = 1.0 / math.sqrt(c)
        self.head_w = parameter(rng.uniform(-bound, bound, (config.n_classes, c)).astype(np.float32), "head.weight")
        self.head_b = parameter(np.zeros(config.n_classes, np.float32), "head.bias")
        self.teacher: Network | None = None

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, *self.gammas, *self.betas, self.head_w, self.head_b]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def storage_size(self) -> int:
        return self.param_count() + sum(m.size + v.size for m, v in zip(self.run_mean, self.run_var))

    def _views(self, spec: SubnetSpec, copy_out: bool = False):
        cfg = self.config
        units = [[] for _ in range(cfg.n_units)]
        c_in = cfg.in_channels
        for u, _, i, k, w in spec.layers(cfg):
            s = (cfg.max_kernel - k) // 2
            index = (slice(0, w), slice(0, c_in), slice(s, s + k))
            if copy_out:
                layer = ConvLayer(
                    parameter(self.weights[i].data[index].copy()),
                    parameter(self.biases[i].data[:w].copy()),
                    parameter(self.gammas[i].data[:w].copy()),
                    parameter(self.betas[i].data[:w].copy()),
                    BatchNormState(self.run_mean[i][:w].copy(), self.run_var[i][:w].copy()),
                )
            else:
                layer = ConvLayer(
                    self.weights[i][index],
                    self.biases[i][:w],
                    self.gammas[i][:w],
                    self.betas[i][:w],
                    BatchNormState(self.run_mean[i][:w], self.run_var[i][:w]),
                )
            units[u].append(layer)
            c_in = w
        return units, c_in

    def forward(self, x, spec: SubnetSpec | None = None, training: bool = False) -> Tensor:
        return masked_forward(self, spec, x, training)

    __call__ = forward


# -- sampling ---------------------------------------------------------------------------


def unlocked(config: SupernetConfig, stage: str) -> dict:
    """Choice sets available to the sampler at ``stage``."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    level = STAGES.index(stage)
    return {
        "kernels": config.kernel_choices if level >= 1 else (config.max_kernel,),
        "depths": [tuple(range(1, d + 1)) if level >= 2 else (d,) for d in config.unit_max_depths],
        "widths": config.width_choices if level >= 3 else (config.max_width,),
    }


def sample_subnet(config: SupernetConfig, stage: str, rng: np.random.Generator) -> SubnetSpec:
    choices = unlocked(config, stage)
    depths = [int(rng.choice(c)) for c in choices["depths"]]
    kernels = [[int(rng.choice(choices["kernels"])) for _ in range(d)] for d in depths]
    widths = [[int(rng.choice(choices["widths"])) for _ in range(d)] for d in depths]
    return SubnetSpec(depths, kernels, widths)


# -- forward / extraction ----------------------------------------------------------------


def masked_forward(net: Supernet, spec: SubnetSpec | None, x, training: bool = False) -> Tensor:
    spec = spec or SubnetSpec.maximal(net.config)
    spec.validate(net.config)
    units, last = net._views(spec)
    return forward_layers(units, net.head_w[:, :last], net.head_b, x, training)


def extract_subnet(net: Supernet, spec: SubnetSpec) -> Network:
    spec.validate(net.config)
    units, last = net._views(spec, copy_out=True)
    return Network(net.config, spec, units, parameter(net.head_w.data[:, :last].copy()),
                   parameter(net.head_b.data.copy()))


def sort_channels(net: Supernet) -> Supernet:
    """Reorder every layer's output channels by descending L1 importance.

    Importance of output channel c of layer i is the L1 norm of the weights
    that read it (layer i+1's input slice, or the classifier column). The
    consumer's input axis is permuted identically, so the full-width
    function is unchanged.
    """
    n = net.config.n_layers
    for i in range(n):
        consumer = net.weights[i + 1] if i + 1 < n else net.head_w
        cw = consumer.data
        importance = np.abs(cw).sum(axis=(0, 2)) if cw.ndim == 3 else np.abs(cw).sum(axis=0)
        perm = np.argsort(-importance, kind="stable")
        for p in (net.weights[i], net.biases[i], net.gammas[i], net.betas[i]):
            p.data = np.ascontiguousarray(p.data[perm])
        net.run_mean[i] = net.run_mean[i][perm].copy()
        net.run_var[i] = net.run_var[i][perm].copy()
        consumer.data = np.ascontiguousarray(cw[:, perm])
        net.channel_order[i] = net.channel_order[i][perm]
    return net


# -- losses ------------------------------------------------------------------------------


def kl_divergence(student_logits: Tensor, teacher_logits, temperature: float = 1.0) -> Tensor:
    """Batch mean of KL(softmax(teacher/T) || softmax(student/T))."""
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, np.float64)
    t = t / temperature
    log_pt = t - t.max(axis=1, keepdims=True)
    log_pt -= np.log(np.exp(log_pt).sum(axis=1, keepdims=True))
    pt = np.exp(log_pt).astype(student_logits.data.dtype)
    log_ps = log_softmax(student_logits * (1.0 / temperature), axis=1)
    per = (Tensor(pt) * (Tensor(log_pt.astype(pt.dtype)) - log_ps)).sum(axis=1)
    return per.mean()


def distill_loss(student_logits: Tensor, teacher_logits, labels, weights, kd_weight: float = 1.0,
                 temperature: float = 1.0) -> Tensor:
    ce = weighted_cross_entropy(student_logits, labels, weights)
    if teacher_logits is None or kd_weight == 0:
        return ce
    return ce + kl_divergence(student_logits, teacher_logits, temperature) * (kd_weight * temperature**2)


# -- batch norm recalibration ------------------------------------------------------------


class _StatRecorder(BatchNormState):
    def __init__(self, target: BatchNormState):
        super().__init__(target.mean, target.var)
        self.target = target
        self.sum_mean = np.zeros_like(target.mean, dtype=np.float64)
        self.sum_var = np.zeros_like(target.var, dtype=np.float64)
        self.count = 0

    def update(self, batch_mean, batch_var, count):
        unbiased = batch_var * (count / max(count - 1, 1))
        self.sum_mean += batch_mean * count
        self.sum_var += unbiased * count
        self.count += count


def calibration_batches(samples, n_batches: int = 2, batch_size: int = 64, seed: int = 0) -> list[np.ndarray]:
    """Folded batches of randomly drawn clips; class-sorted data still gives mixed batches."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.permutation(len(samples))[: n_batches * batch_size])
    clips = np.asarray(samples[idx], dtype=np.float32)[rng.permutation(len(idx))]
    return [audio.fold(clips[i : i + batch_size]) for i in range(0, len(clips), batch_size)]


def recalibrate_bn(network: Network, batches) -> Network:
    """Recompute running stats from calibration data without touching weights."""
    batches = list(batches)
    if not batches:
        raise ValueError("recalibrate_bn needs at least one calibration batch")
    layers = [layer for layer in network.layers() if layer.bn is not None]
    recorders = [_StatRecorder(layer.bn) for layer in layers]
    for layer, rec in zip(layers, recorders):
        layer.bn = rec
    try:
        with no_grad():
            for xb in batches:
                network(xb, training=True)
    finally:
        for layer, rec in zip(layers, recorders):
            layer.bn = rec.target
            layer.bn.mean[...] = rec.sum_mean / rec.count
            layer.bn.var[...] = rec.sum_var / rec.count
    return network


# -- training ------------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: dict = field(default_factory=lambda: {"full": 30, "elastic_kernel": 30, "elastic_depth": 30,
                                                   "elastic_width": 30})
    lr: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    subnets_per_step: int = 1
    kd_weight: float = 1.0
    kd_temperature: float = 1.0
    augment: audio.AugmentSpec | None = None

    def __post_init__(self):
        unknown = set(self.epochs) - set(STAGES)
        if unknown:
            raise ValueError(f"unknown stages {sorted(unknown)}")
        # keep the canonical stage order no matter how the dict was written
        self.epochs = {s: int(self.epochs.get(s, 0)) for s in STAGES}

    def stage_sequence(self):
        for stage in STAGES:
            for _ in range(self.epochs[stage]):
                yield stage


@dataclass
class EpochLog:
    epoch: int
    stage: str
    loss: float


def make_batch(samples: np.ndarray, idx: np.ndarray, augment: audio.AugmentSpec | None, seed_prefix) -> np.ndarray:
    """Augment (if requested) and fold the selected clips into (N, 128, 128)."""
    if augment is None:
        clips = np.asarray(samples[idx], dtype=np.float32)
    else:
        clips = np.stack([audio.augment(samples[i], augment, (*seed_prefix, int(i))) for i in idx])
    return audio.fold(clips)


def _teacher_snapshot(net: Supernet) -> Network:
    teacher = extract_subnet(net, SubnetSpec.maximal(net.config))
    for p in teacher.parameters():
        p.requires_grad = False
    return teacher


def train_supernet(net: Supernet, samples: np.ndarray, labels: np.ndarray, schedule: TrainSchedule,
                   seed: int = 0, class_weights=None, on_epoch=None) -> list[EpochLog]:
    """Progressive-shrinking training; mutates ``net`` and returns the per-epoch loss log.

    Knowledge distillation runs only in the elastic stages, against the full
    network frozen at the end of the ``full`` stage.
    """
    labels = np.asarray(labels)
    n = len(labels)
    weights = np.ones(net.config.n_classes, np.float32) if class_weights is None else np.asarray(class_weights)
    logs: list[EpochLog] = []
    stage = None
    opt = None
    storage = net.storage_size()
    for epoch, next_stage in enumerate(schedule.stage_sequence()):
        if next_stage != stage:
            if stage == "full" or (stage is None and next_stage != "full" and net.teacher is None):
                net.teacher = _teacher_snapshot(net)
            if next_stage == "elastic_width":
                sort_channels(net)
            stage = next_stage
            net.stage = stage
            opt = SGD(net.parameters(), lr=schedule.lr, momentum=schedule.momentum)
            log.info("entering stage %s at epoch %d", stage, epoch)
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start : start + schedule.batch_size]
            x = make_batch(samples, idx, schedule.augment, (seed, epoch))
            y = labels[idx]
            teacher_logits = None
            if stage != "full" and net.teacher is not None and schedule.kd_weight:
                with no_grad():
                    teacher_logits = net.teacher(x).data
            opt.zero_grad()
            for _ in range(schedule.subnets_per_step):
                spec = sample_subnet(net.config, stage, rng)
                logits = masked_forward(net, spec, x, training=True)
                loss = distill_loss(logits, teacher_logits, y, weights, schedule.kd_weight,
                                    schedule.kd_temperature)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} ({stage}), spec {spec.key()}")
                if schedule.subnets_per_step > 1:
                    loss = loss * (1.0 / schedule.subnets_per_step)
                loss.backward()
                total += float(loss.data) * len(idx)
            count += len(idx)
            opt.step()
        entry = EpochLog(epoch, stage, total / count)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        assert net.storage_size() == storage
    return logs


def predict(model, samples: np.ndarray, batch_size: int = 64, spec: SubnetSpec | None = None) -> np.ndarray:
    preds = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            x = audio.fold(np.asarray(samples[start : start + batch_size], dtype=np.float32))
            logits = model(x) if spec is None else masked_forward(model, spec, x)
            preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model, samples: np.ndarray, labels: np.ndarray, **kw) -> float:
    return float((predict(model, samples, **kw) == np.asarray(labels)).mean())


# -- checkpoint file -----------------------------------------------------------------------

CKPT_MAGIC = b"OFAKWS01"
CKPT_VERSION = 1
ROLES = ("weight", "bias", "gamma", "beta", "running_mean", "running_var", "channel_order")
TEACHER_ROLE_OFFSET = 16


def _tensors_of(net: Supernet):
    for i in range(net.config.n_layers):
        for role, arr in zip(ROLES, (net.weights[i].data, net.biases[i].data, net.gammas[i].data, net.betas[i].data,
                                     net.run_mean[i], net.run_var[i], net.channel_order[i])):
            yield i, ROLES.index(role), arr
    head = net.config.n_layers
    yield head, 0, net.head_w.data
    yield head, 1, net.head_b.data


def _teacher_tensors(teacher: Network):
    for i, layer in enumerate(teacher.layers()):
        for r, arr in enumerate((layer.weight.data, layer.bias.data, layer.gamma.data, layer.beta.data,
                                 layer.bn.mean, layer.bn.var)):
            yield i, r + TEACHER_ROLE_OFFSET, arr
    n = len(teacher.layers())
    yield n, TEACHER_ROLE_OFFSET, teacher.head_w.data
    yield n, TEACHER_ROLE_OFFSET + 1, teacher.head_b.data


def save_checkpoint(net: Supernet, path, extra: dict | None = None) -> None:
    block = json.dumps({"config": net.config.to_dict(), "config_hash": net.config.digest(), **(extra or {})},
                       sort_keys=True).encode()
    records = list(_tensors_of(net))
    if net.teacher is not None:
        records += list(_teacher_tensors(net.teacher))
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<HI", CKPT_VERSION, len(block)) + block
    body += struct.pack("<BI", STAGES.index(net.stage), len(records))
    for layer_id, role, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        body += struct.pack("<HBB", layer_id, role, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an OFAKWS01 checkpoint")
    _, n = struct.unpack_from("<HI", raw, 8)
    return json.loads(raw[14 : 14 + n])


def load_checkpoint(path) -> Supernet:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an OFAKWS01 checkpoint")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise ValueError(f"{path}: checkpoint CRC mismatch")
    version, n = struct.unpack_from("<HI", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 14
    header = json.loads(raw[pos : pos + n])
    pos += n
    stage_id, n_records = struct.unpack_from("<BI", raw, pos)
    pos += 5
    net = Supernet(SupernetConfig.from_dict(header["config"]))
    net.stage = STAGES[stage_id]
    teacher = {}
    n_layers = net.config.n_layers
    for _ in range(n_records):
        layer_id, role, ndim = struct.unpack_from("<HBB", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
        if role >= TEACHER_ROLE_OFFSET:
            teacher[(layer_id, role - TEACHER_ROLE_OFFSET)] = arr
            continue
        if layer_id == n_layers:
            (net.head_w if role == 0 else net.head_b).data = arr
            continue
        name = ROLES[role]
        if name == "running_mean":
            net.run_mean[layer_id] = arr
        elif name == "running_var":
            net.run_var[layer_id] = arr
        elif name == "channel_order":
            net.channel_order[layer_id] = arr.astype(np.int64)
        else:
            getattr(net, {"weight": "weights", "bias": "biases", "gamma": "gammas", "beta": "betas"}[name])[
                layer_id].data = arr
    if teacher:
        t = extract_subnet(net, SubnetSpec.maximal(net.config))
        for i, layer in enumerate(t.layers()):
            layer.weight.data, layer.bias.data = teacher[(i, 0)], teacher[(i, 1)]
            layer.gamma.data, layer.beta.data = teacher[(i, 2)], teacher[(i, 3)]
            layer.bn = BatchNormState(teacher[(i, 4)], teacher[(i, 5)])
        t.head_w.data, t.head_b.data = teacher[(n_layers, 0)], teacher[(n_layers, 1)]
        for p in t.parameters():
            p.requires_grad = False
        net.teacher = t
    return net


def clone(net: Supernet) -> Supernet:
    return copy.deepcopy(net)
