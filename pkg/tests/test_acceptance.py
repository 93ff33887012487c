"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 8 needs a local copy of Speech Commands v2; point the
``KWS_SPEECH_COMMANDS`` environment variable at its root to enable it.
"""

import json
import os
import time

import numpy as np
import pytest

from foldkws import audio
from foldkws.cost import kilobytes, param_count, spec_cost
from foldkws.mfcc import MfccConfig, fft, mfcc
from foldkws.network import STAGES, SubnetSpec, SupernetConfig
from foldkws.quant import (
    QATSchedule,
    QuantizedModel,
    QuantParams,
    bn_fold,
    export_int8,
    fake_quantize,
    qat_train,
    quantize_now,
)
from foldkws.search import Constraint, Evaluator, SearchConfig, evolutionary_search
from foldkws.supernet import (
    Supernet,
    TrainSchedule,
    accuracy,
    calibration_batches,
    extract_subnet,
    kl_divergence,
    masked_forward,
    recalibrate_bn,
    sample_subnet,
    sort_channels,
    train_supernet,
    unlocked,
)
from foldkws.tensor import (
    BatchNormState,
    Tensor,
    batchnorm1d,
    conv1d,
    finite_diff_check,
    global_avgpool1d,
    linear,
    log_softmax,
    maxpool1d,
    no_grad,
    relu,
    weighted_cross_entropy,
)

from .conftest import ACCEPTANCE_LINES
from .oracles import conv1d_loop, count_params, naive_dft

HERE = os.path.dirname(__file__)


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# -- 1 ----------------------------------------------------------------------------


def _grad_ops(rng):
    labels = np.array([0, 2, 1])
    teacher = rng.standard_normal((3, 4))
    return {
        "add": (lambda a, b: a + b, [rng.standard_normal((3, 4)), rng.standard_normal(4)]),
        "sub": (lambda a, b: a - b, [rng.standard_normal((3, 4)), rng.standard_normal((3, 1))]),
        "mul": (lambda a, b: a * b, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]),
        "neg": (lambda a: -a, [rng.standard_normal(5)]),
        "sum": (lambda a: a.sum(axis=1), [rng.standard_normal((3, 4))]),
        "mean": (lambda a: a.mean(axis=0), [rng.standard_normal((3, 4))]),
        "reshape": (lambda a: a.reshape(2, 6), [rng.standard_normal((3, 4))]),
        "getitem": (lambda a: a[1:, ::2], [rng.standard_normal((3, 4))]),
        "conv1d": (lambda x, w, b: conv1d(x, w, b, padding=2),
                   [rng.standard_normal((2, 3, 9)), rng.standard_normal((4, 3, 5)), rng.standard_normal(4)]),
        "conv1d_k1": (lambda x, w, b: conv1d(x, w, b),
                      [rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 1)), rng.standard_normal(2)]),
        "relu": (relu, [rng.standard_normal((3, 7))]),
        "maxpool1d": (lambda x: maxpool1d(x, 2, 2), [rng.standard_normal((2, 3, 8))]),
        "global_avgpool1d": (global_avgpool1d, [rng.standard_normal((2, 3, 8))]),
        "batchnorm1d_train": (lambda x, g, b: batchnorm1d(x, g, b, None, training=True),
                              [rng.standard_normal((3, 4, 6)), rng.uniform(0.5, 2, 4), rng.standard_normal(4)]),
        "batchnorm1d_eval": (lambda x, g, b: batchnorm1d(x, g, b, BatchNormState(np.full(4, 0.3), np.full(4, 1.7)),
                                                         training=False),
                             [rng.standard_normal((3, 4, 6)), rng.uniform(0.5, 2, 4), rng.standard_normal(4)]),
        "linear": (linear, [rng.standard_normal((3, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)]),
        "log_softmax": (lambda z: log_softmax(z, axis=1), [rng.standard_normal((3, 5))]),
        "weighted_cross_entropy": (lambda z: weighted_cross_entropy(z, labels, np.array([1.0, 0.5, 2.0])),
                                   [rng.standard_normal((3, 3))]),
        "kl_divergence": (lambda z: kl_divergence(z, teacher, temperature=2.0), [rng.standard_normal((3, 4))]),
    }


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst, worst_abs, failed = 0.0, 0.0, []
    for name, (op, inputs) in _grad_ops(np.random.default_rng(0)).items():
        rep = finite_diff_check(op, inputs, tolerance=1e-3, abs_floor=1e-8, n_coords=100, h=1e-5)
        worst = max(worst, rep.max_rel_error)
        worst_abs = max(worst_abs, rep.max_abs_error)
        if not rep.passed:
            failed.append(name)
    elapsed = time.perf_counter() - start
    ok = not failed and elapsed < 60
    verdict(1, ok, f"{len(_grad_ops(np.random.default_rng(0)))} ops, worst rel error above floor {worst:.2e}, "
                   f"worst abs error {worst_abs:.1e}, "
                   f"failures {failed or 'none'}, {elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------------


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    mismatched = 0
    for _ in range(200):
        c_in, c_out = rng.integers(1, 5, size=2)
        k = int(rng.choice([1, 3, 5]))
        length = int(rng.integers(k, 12))
        pad = int(rng.integers(0, k // 2 + 1))
        x = rng.standard_normal((c_in, length)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, k)).astype(np.float32)
        b = rng.standard_normal(c_out).astype(np.float32)
        got = conv1d(Tensor(x), Tensor(w), Tensor(b), padding=pad, exact=True).data
        mismatched += not np.array_equal(got, conv1d_loop(x, w, b, pad))

    fft_err = 0.0
    for n in (2, 8, 64, 1024):
        x = rng.standard_normal(n)
        ref = naive_dft(x, n)
        fft_err = max(fft_err, float(np.abs(fft(x, n) - ref).max() / np.abs(ref).max()))

    fixture = np.load(os.path.join(HERE, "data", "mfcc_fixture.npz"))
    mfcc_err = float(np.abs(mfcc(fixture["samples"], MfccConfig()) - fixture["mfcc"]).max())
    ok = mismatched == 0 and fft_err <= 1e-6 and mfcc_err <= 1e-4
    verdict(2, ok, f"conv bitwise mismatches {mismatched}/200, FFT rel error {fft_err:.1e}, "
                   f"MFCC max error {mfcc_err:.1e}")


# -- 3 ----------------------------------------------------------------------------


def test_criterion_3_fold_bijection():
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(100):
        batch = rng.standard_normal((100, audio.WINDOW)).astype(np.float32)
        batch[:, rng.integers(audio.WINDOW, size=5)] = np.array([np.nan, -0.0, np.inf, 1e-45, -np.inf], np.float32)
        bad += not np.array_equal(audio.unfold(audio.fold(batch)).view(np.uint32), batch.view(np.uint32))
    grid = audio.fold(np.arange(audio.WINDOW))
    c, t = np.meshgrid(np.arange(128), np.arange(128), indexing="ij")
    iota_ok = bool(np.array_equal(grid, 128 * c + t))
    verdict(3, bad == 0 and iota_ok, f"10^4 buffers, {bad} batch mismatches; iota layout exact: {iota_ok}")


# -- 4 ----------------------------------------------------------------------------


def _perturbed_supernet(cfg, seed):
    net = Supernet(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for i in range(cfg.n_layers):
        net.run_mean[i][:] = rng.normal(0, 0.1, cfg.max_width)
        net.run_var[i][:] = rng.uniform(0.5, 2.0, cfg.max_width)
        net.gammas[i].data[:] = rng.uniform(0.5, 1.5, cfg.max_width)
        net.betas[i].data[:] = rng.normal(0, 0.1, cfg.max_width)
    return net


def test_criterion_4_subnet_machinery():
    cfg = SupernetConfig()
    net = _perturbed_supernet(cfg, 4)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 128, 128)).astype(np.float32)
    extract_err = 0.0
    with no_grad():
        for _ in range(50):
            spec = sample_subnet(cfg, "elastic_width", rng)
            a = masked_forward(net, spec, x).data
            b = extract_subnet(net, spec)(x).data
            extract_err = max(extract_err, float(np.abs(a - b).max()))
        before = masked_forward(net, None, x).data
        sort_channels(net)
        sort_err = float(np.abs(masked_forward(net, None, x).data - before).max())

    violations = 0
    for stage in STAGES:
        allowed = unlocked(cfg, stage)
        srng = np.random.default_rng(len(stage))
        for _ in range(10_000):
            spec = sample_subnet(cfg, stage, srng)
            violations += sum(d not in allowed["depths"][u] for u, d in enumerate(spec.depths))
            violations += sum(k not in allowed["kernels"] for ks in spec.kernels for k in ks)
            violations += sum(w not in allowed["widths"] for ws in spec.widths for w in ws)
    ok = extract_err <= 1e-5 and sort_err <= 1e-5 and violations == 0
    verdict(4, ok, f"masked vs extracted max diff {extract_err:.1e} (50 specs), sort_channels diff {sort_err:.1e}, "
                   f"stage-rule violations {violations} in 4x10^4 draws")


# -- 5 ----------------------------------------------------------------------------


def test_criterion_5_quantization():
    rng = np.random.default_rng(5)
    fold_err = 0.0
    for c_out, c_in, k in [(8, 4, 1), (16, 8, 3), (32, 16, 5)]:
        w = rng.standard_normal((c_out, c_in, k)).astype(np.float32)
        b = rng.standard_normal(c_out).astype(np.float32)
        gamma, beta = rng.uniform(0.3, 2, c_out).astype(np.float32), rng.normal(0, 1, c_out).astype(np.float32)
        mean, var = rng.normal(0, 1, c_out).astype(np.float32), rng.uniform(0.2, 3, c_out).astype(np.float32)
        fw, fb = bn_fold(w, b, gamma, beta, mean, var)
        for _ in range(100):
            x = Tensor(rng.standard_normal((1, c_in, 16)).astype(np.float32))
            ref = batchnorm1d(conv1d(x, Tensor(w), Tensor(b), padding=k // 2), Tensor(gamma), Tensor(beta),
                              BatchNormState(mean, var), training=False).data
            fold_err = max(fold_err, float(np.abs(conv1d(x, Tensor(fw), Tensor(fb), padding=k // 2).data - ref).max()))

    bound_ok = True
    for e in range(10):
        p = QuantParams(e)
        xs = rng.uniform(-128 * p.scale, 127 * p.scale, 100_000).astype(np.float32)
        bound_ok &= bool(np.all(np.abs(fake_quantize(Tensor(xs), p).data.astype(np.float64) - xs) <= p.scale / 2))

    cfg = SupernetConfig(unit_max_depths=(2, 2), max_width=16, width_choices=(8, 16), n_classes=4)
    net = _perturbed_supernet(cfg, 5)
    sub = extract_subnet(net, SubnetSpec((2, 1), ((5, 3), (1,)), ((16, 8), (16,))))
    batches = [rng.standard_normal((8, 128, 128)).astype(np.float32) for _ in range(2)]
    recalibrate_bn(sub, batches)
    quantize_now(sub, batches)
    model = export_int8(sub)
    raw = model.to_bytes()
    reloaded = QuantizedModel.from_bytes(raw)
    roundtrip = reloaded.to_bytes() == raw
    with no_grad():
        x = rng.standard_normal((4, 128, 128)).astype(np.float32)
        dual_err = float(np.abs(reloaded(x).data - sub(x).data).max())
    ok = fold_err <= 1e-4 and bound_ok and roundtrip and dual_err <= 1e-4
    verdict(5, ok, f"BN-fold max error {fold_err:.1e}, rounding bound over 10^6 elements: {bound_ok}, "
                   f"export roundtrip byte-identical: {roundtrip}, int8 vs fake-quant {dual_err:.1e}")


# -- 6 ----------------------------------------------------------------------------


def test_criterion_6_search():
    cfg = SupernetConfig(unit_max_depths=(2, 2), max_width=16, width_choices=(4, 8, 12, 16), n_classes=4)
    ds = audio.synthetic_tones(4, 40, seed=6)
    net = Supernet(cfg, seed=6)
    xt, yt = ds.subset("train")
    train_supernet(net, xt, yt, TrainSchedule(epochs={s: 1 for s in STAGES}, lr=0.01), seed=6)
    xv, yv = ds.subset("val")
    constraint = Constraint(max_weight_bytes=8_000)

    def run():
        ev = Evaluator(net, xv, yv, xt, subset=64, calib_batches=1, batch_size=32, seed=6)
        return evolutionary_search(cfg, constraint, SearchConfig(population=64, generations=20, seed=6), ev)

    first, second = run(), run()
    best = [h["best_fitness"] for h in first.history]
    monotone = len(best) == 21 and all(b >= a for a, b in zip(best, best[1:]))
    feasible = [constraint.satisfied(SubnetSpec.from_dict(json.loads(a["spec"])), cfg) for a in first.audit]
    share = sum(feasible) / len(feasible)
    replay = first.report_lines() == second.report_lines()
    ok = monotone and share == 1.0 and replay
    verdict(6, ok, f"best-ever monotone over 20 generations: {monotone}, audited feasible {share:.0%} of "
                   f"{len(feasible)}, replay identical: {replay}")


# -- 7 ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_run():
    """The desk-scale synthetic pipeline, timed end to end."""
    start = time.perf_counter()
    ds = audio.synthetic_tones(4, 200, seed=0)
    xt, yt = ds.subset("train")
    xv, yv = ds.subset("val")
    xs, ys = ds.subset("test")
    cfg = SupernetConfig(n_classes=4)
    net = Supernet(cfg, seed=0)
    facts = {"n_clips": len(ds.labels)}

    def on_epoch(entry):
        if entry.epoch == 9:
            facts["full_val"] = accuracy(net, xv, yv)

    schedule = TrainSchedule(epochs={s: 10 for s in STAGES}, lr=0.01)
    facts["log"] = train_supernet(net, xt, yt, schedule, seed=0, on_epoch=on_epoch)

    calib = calibration_batches(xt, 2, 64, seed=0)
    rng = np.random.default_rng(7)
    facts["recal"] = []
    for _ in range(3):
        spec = sample_subnet(cfg, "elastic_width", rng)
        pre = accuracy(extract_subnet(net, spec), xv, yv)
        post = accuracy(recalibrate_bn(extract_subnet(net, spec), calib), xv, yv)
        facts["recal"].append((pre, post))

    evaluator = Evaluator(net, xv, yv, xt, seed=0)
    result = evolutionary_search(cfg, Constraint(), SearchConfig(population=16, generations=5, seed=0), evaluator)
    sub = recalibrate_bn(extract_subnet(net, result.best.spec), calib)
    qat_acc = {}

    def on_qat(entry):
        if entry.epoch >= 15:
            qat_acc[entry.epoch] = accuracy(sub, xv, yv)

    qat_train(sub, xt, yt, QATSchedule.scaled(20, 15), seed=0, on_epoch=on_qat)
    model = QuantizedModel.from_bytes(export_int8(sub).to_bytes())
    facts.update(search=result, qat_acc=qat_acc, test_acc=accuracy(model, xs, ys),
                 seconds=time.perf_counter() - start)
    return facts


def test_criterion_7_desk_scale_end_to_end(desk_run):
    acc, secs = desk_run["test_acc"], desk_run["seconds"]
    ok = desk_run["n_clips"] == 800 and acc >= 0.95 and secs <= 15 * 60
    verdict(7, ok, f"int8 test accuracy {acc:.3f} (need >= 0.95), runtime {secs / 60:.1f} min (need <= 15)")


def test_desk_run_full_stage_and_stage_order(desk_run):
    assert desk_run["full_val"] >= 0.95
    stages = [e.stage for e in desk_run["log"]]
    assert stages == [s for s in STAGES for _ in range(10)]


def test_desk_run_recalibration_never_hurts(desk_run):
    for pre, post in desk_run["recal"]:
        assert post >= pre


def test_desk_run_qat_drop_small(desk_run):
    acc = desk_run["qat_acc"]
    assert acc[15] - acc[19] <= 0.02
    best = desk_run["search"]
    assert best.best.cost.param_bytes <= Constraint().max_weight_bytes
    assert best.best.fitness >= 1 / 4


# -- 8 ----------------------------------------------------------------------------


SPEECH_ROOT = os.environ.get("KWS_SPEECH_COMMANDS")


def test_criterion_8_real_data_smoke():
    if not SPEECH_ROOT:
        reason = "set KWS_SPEECH_COMMANDS to a Speech Commands v2 root"
        ACCEPTANCE_LINES.append(f"[SKIP] criterion 8: {reason}")
        pytest.skip(reason)
    start = time.perf_counter()
    vocab = audio.Vocabulary(("yes", "no"))
    ds = audio.load_speech_commands(SPEECH_ROOT, seed=0, vocab=vocab)
    # thin the Unknown class to the size of a keyword class, giving roughly 8k clips
    rng = np.random.default_rng(0)
    unknown = np.flatnonzero(ds.labels == vocab.unknown)
    n_keep = int(np.bincount(ds.labels)[: len(vocab.keywords)].mean())
    keep = np.sort(np.concatenate([np.flatnonzero(ds.labels != vocab.unknown),
                                   rng.choice(unknown, min(n_keep, len(unknown)), replace=False)]))
    ds = audio.Dataset(ds.samples[keep], ds.labels[keep], ds.splits[keep], ds.class_names, ds.unknown)
    xt, yt = ds.subset("train")
    xs, ys = ds.subset("test")
    weights = audio.class_weights(yt, vocab.n_classes, vocab.unknown)
    cfg = SupernetConfig(unit_max_depths=(1,) * 6, n_classes=vocab.n_classes)
    net = Supernet(cfg, seed=0)
    train_supernet(net, xt, yt, TrainSchedule(epochs={"full": 30}, lr=0.01), seed=0, class_weights=weights)
    sub = recalibrate_bn(extract_subnet(net, SubnetSpec.maximal(cfg)), calibration_batches(xt, 4, 64, seed=0))
    float_acc = accuracy(sub, xs, ys)
    qat_train(sub, xt, yt, QATSchedule.scaled(10, 5), seed=0, class_weights=weights)
    int8_acc = accuracy(QuantizedModel.from_bytes(export_int8(sub).to_bytes()), xs, ys)
    hours = (time.perf_counter() - start) / 3600
    ok = float_acc >= 0.85 and float_acc - int8_acc <= 0.02 and hours <= 2
    verdict(8, ok, f"float {float_acc:.3f}, int8 {int8_acc:.3f}, {hours:.2f} h")


# -- 9 ----------------------------------------------------------------------------


def test_criterion_9_cost_accounting():
    cfg = SupernetConfig()
    d = cfg.unit_max_depths
    lib = param_count(SubnetSpec.maximal(cfg), cfg)
    oracle = count_params(d, [[128] * n for n in d], [[5] * n for n in d])
    tensors = Supernet(cfg).param_count()
    wide = SupernetConfig(width_choices=tuple(range(1, 129)))
    spec = SubnetSpec((3, 3, 2, 2, 2, 2), tuple((5,) * n for n in d),
                      ((108, 104, 115), (55, 47, 116), (41, 88), (47, 66), (82, 77), (25, 98)))
    cost = spec_cost(spec, wide, bits=8)
    size = f"{kilobytes(cost.param_bytes):.1f} KB"
    ok = lib == oracle == tensors == 1_153_804 and cost.param_count == 419_800 and size == "419.8 KB"
    verdict(9, ok, f"maxima params {lib} / oracle {oracle} / tensors {tensors}; "
                   f"{cost.param_count}-param spec -> {cost.param_bytes} bytes = {size}")


# -- 10 ---------------------------------------------------------------------------


def test_criterion_10_qat_schedule():
    ds = audio.synthetic_tones(2, 4, seed=10)
    cfg = SupernetConfig(unit_max_depths=(1, 1), max_width=4, width_choices=(4,), n_classes=2)
    net = extract_subnet(Supernet(cfg, seed=10), SubnetSpec.maximal(cfg))
    logs = qat_train(net, ds.samples, ds.labels, QATSchedule(batch_size=8), seed=10)
    lrs = [e.lr for e in logs]
    halvings = [e for e in range(1, len(lrs)) if lrs[e] == lrs[e - 1] / 2]
    other_changes = [e for e in range(1, len(lrs)) if lrs[e] != lrs[e - 1] and e not in halvings]
    first_quant = next(e.epoch for e in logs if e.quantized)
    ok = (len(logs) == 200 and halvings == [100, 120, 140, 160, 180] and not other_changes
          and first_quant == 150 and all(e.quantized for e in logs[150:]) and lrs[-1] == 0.001 / 32)
    verdict(10, ok, f"{len(logs)} epochs, lr halved at {halvings}, quantizers on from epoch {first_quant}, "
                    f"final lr {lrs[-1]:.4g}")
