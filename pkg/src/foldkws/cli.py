"""``foldkws`` command line: prepare, train-supernet, search, qat, eval, mfcc, cost, export.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import audio
from .config import ConfigError, RunConfig, load_config
from .cost import cost_report
from .mfcc import MfccConfig, mfcc
from .network import SubnetSpec, SupernetConfig
from .quant import QuantizedModel, export_int8, qat_train
from .search import Evaluator, evolutionary_search
from .supernet import (
    CKPT_MAGIC,
    Supernet,
    calibration_batches,
    extract_subnet,
    load_checkpoint,
    predict,
    read_checkpoint_header,
    recalibrate_bn,
    save_checkpoint,
    train_supernet,
)

log = logging.getLogger("foldkws")


class UsageError(Exception):
    """Bad flags, missing inputs: reported with exit code 2."""


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig(seed=0)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "cache", None):
        cfg.cache = args.cache
    return cfg


def _dataset(cfg: RunConfig) -> audio.Dataset:
    if not cfg.cache:
        raise UsageError("no example cache given (use --cache or the config's 'cache')")
    if not Path(cfg.cache).is_file():
        raise UsageError(f"example cache not found: {cfg.cache}")
    return audio.Dataset.load(cfg.cache)


def _weights(ds: audio.Dataset, labels) -> np.ndarray:
    return audio.class_weights(labels, ds.n_classes, ds.unknown)


def _load_spec(path) -> SubnetSpec:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"spec file not found: {path}")
    raw = json.loads(path.read_text())
    return SubnetSpec.from_dict(raw.get("best_spec", raw))


# -- commands ------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    if args.synthetic:
        n_classes, n_per_class = args.synthetic
        if n_classes < 2 or n_per_class < 1:
            raise UsageError("--synthetic needs N_CLASSES >= 2 and N_PER_CLASS >= 1")
        ds = audio.synthetic_tones(n_classes, n_per_class, seed=args.seed)
        extra = {"source": "synthetic", "seed": args.seed}
    else:
        if not args.data or not Path(args.data).is_dir():
            raise UsageError(f"dataset directory not found: {args.data}")
        vocab = audio.Vocabulary(tuple(args.keywords.split(","))) if args.keywords else audio.Vocabulary()
        try:
            ds = audio.load_speech_commands(args.data, seed=args.seed, vocab=vocab)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
        extra = {"source": str(args.data), "seed": args.seed}
    report_path = ds.save(args.cache, extra)
    report = json.loads(report_path.read_text())
    _emit({"cache": str(args.cache), "records": int(len(ds.labels)), "class_names": ds.class_names,
           "counts": report["counts"]})
    return 0


def cmd_train_supernet(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    x, y = ds.subset("train")
    sn_cfg = dataclasses.replace(cfg.supernet, n_classes=ds.n_classes)
    net = Supernet(sn_cfg, seed=cfg.seed)
    log_path = Path(args.log or f"{args.out}.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "stage", "loss"])

        def on_epoch(entry):
            writer.writerow([entry.epoch, entry.stage, f"{entry.loss:.6f}"])
            fh.flush()
            log.info("epoch %d %s loss %.4f", entry.epoch, entry.stage, entry.loss)

        train_supernet(net, x, y, cfg.train, seed=cfg.seed, class_weights=_weights(ds, y), on_epoch=on_epoch)
    save_checkpoint(net, args.out, extra={"run_config_hash": cfg.digest(), "seed": cfg.seed})
    _emit({"checkpoint": str(args.out), "log": str(log_path), "stage": net.stage,
           "config_hash": cfg.digest()})
    return 0


def _load_supernet(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_search(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    net = _load_supernet(args.ckpt)
    constraint = cfg.constraint
    if args.constraint_bytes is not None:
        constraint = dataclasses.replace(constraint, max_weight_bytes=args.constraint_bytes)
    search = cfg.search
    if args.population or args.generations is not None:
        search = dataclasses.replace(search, population=args.population or search.population,
                                     generations=search.generations if args.generations is None else args.generations)
    search = dataclasses.replace(search, seed=cfg.seed)
    xv, yv = ds.subset("val")
    xt, _ = ds.subset("train")
    evaluator = Evaluator(net, xv, yv, xt, subset=cfg.val_subset, calib_batches=cfg.calib_batches, seed=cfg.seed)
    result = evolutionary_search(net.config, constraint, search, evaluator,
                                 on_generation=lambda h: log.info("generation %d best %.4f", h["generation"],
                                                                  h["best_fitness"]))
    out = Path(args.out)
    Path(f"{out}.jsonl").write_text(result.report_lines())
    report = {
        "best_spec": result.best.spec.to_dict(),
        "best_fitness": result.best.fitness,
        "cost": dataclasses.asdict(result.best.cost),
        "constraint": dataclasses.asdict(constraint),
        "history": result.history,
        "val_subset_indices": evaluator.val_index.tolist(),
        "checkpoint_config_hash": read_checkpoint_header(args.ckpt)["config_hash"],
        "config_hash": cfg.digest(),
    }
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    _emit({k: report[k] for k in ("best_spec", "best_fitness", "cost")})
    return 0


def cmd_qat(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    net = _load_supernet(args.ckpt)
    spec = _load_spec(args.spec)
    x, y = ds.subset("train")
    sub = recalibrate_bn(extract_subnet(net, spec), calibration_batches(x, cfg.calib_batches, seed=cfg.seed))
    log_path = Path(f"{args.out}.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "quantized", "loss"])

        def on_epoch(e):
            writer.writerow([e.epoch, repr(e.lr), int(e.quantized), f"{e.loss:.6f}"])
            fh.flush()

        qat_train(sub, x, y, cfg.qat, seed=cfg.seed, class_weights=_weights(ds, y), on_epoch=on_epoch)
    model = export_int8(sub, config_hash=cfg.digest())
    model.save(args.out)
    _emit({"model": str(args.out), "log": str(log_path), "param_count": model.param_count(),
           "size_bytes_int8": model.size_bytes_int8(), "config_hash": cfg.digest()})
    return 0


def _load_model(path, spec_path=None):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"model not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == CKPT_MAGIC:
        net = load_checkpoint(path)
        spec = _load_spec(spec_path) if spec_path else SubnetSpec.maximal(net.config)
        return extract_subnet(net, spec)
    return QuantizedModel.load(path)


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    model = _load_model(args.model, args.spec)
    x, y = ds.subset(args.split)
    if len(y) == 0:
        raise UsageError(f"split '{args.split}' is empty")
    preds = predict(model, x)
    cm = confusion_matrix(y, preds, ds.n_classes)
    _emit({"split": args.split, "n": int(len(y)), "accuracy": float(np.trace(cm) / cm.sum()),
           "class_names": ds.class_names, "confusion": cm.tolist()})
    return 0


def cmd_mfcc(args) -> int:
    if not Path(args.wav).is_file():
        raise UsageError(f"wav file not found: {args.wav}")
    feats = mfcc(audio.read_wav(args.wav), MfccConfig())
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"c{i}" for i in range(feats.shape[1])])
        writer.writerows([[f"{v:.8g}" for v in row] for row in feats])
    _emit({"out": str(args.out), "frames": int(feats.shape[0]), "coefficients": int(feats.shape[1])})
    return 0


def cmd_cost(args) -> int:
    config = SupernetConfig()
    if args.config:
        config = load_config(args.config).supernet
    if args.n_classes:
        config = dataclasses.replace(config, n_classes=args.n_classes)
    spec = _load_spec(args.spec) if args.spec else SubnetSpec.maximal(config)
    try:
        report = cost_report(spec, config)
    except ValueError as exc:
        raise UsageError(f"spec does not fit the supernet config: {exc}") from exc
    _emit(report)
    return 0


def cmd_export(args) -> int:
    path = Path(args.model)
    if not path.is_file():
        raise UsageError(f"model not found: {path}")
    model = QuantizedModel.load(path)
    raw = model.to_bytes()
    Path(args.out).write_bytes(raw)
    _emit({"out": str(args.out), "bytes": len(raw), "param_count": model.param_count(),
           "size_bytes_int8": model.size_bytes_int8(), "size_kb_int8": model.size_bytes_int8() / 1000,
           "config_hash": model.descriptor.get("config_hash")})
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foldkws", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_run(sp, cache=True):
        sp.add_argument("--config", help="run config JSON")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if cache:
            sp.add_argument("--cache", help="example cache (overrides the config)")

    sp = sub.add_parser("prepare", help="build the example cache")
    sp.add_argument("--data", help="Speech Commands root directory")
    sp.add_argument("--cache", required=True)
    sp.add_argument("--synthetic", nargs=2, type=int, metavar=("N_CLASSES", "N_PER_CLASS"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--keywords", help="comma-separated keyword list (default: the 10 standard keywords)")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train-supernet", help="progressive-shrinking supernet training")
    with_run(sp)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="per-epoch CSV (default: <out>.csv)")
    sp.set_defaults(func=cmd_train_supernet)

    sp = sub.add_parser("search", help="evolutionary subnet search")
    with_run(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--constraint-bytes", type=int)
    sp.add_argument("--population", type=int)
    sp.add_argument("--generations", type=int)
    sp.add_argument("--out", required=True, help="report JSON (history also written to <out>.jsonl)")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("qat", help="quantization-aware fine-tuning and int8 export")
    with_run(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--spec", required=True, help="search report or spec JSON")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_qat)

    sp = sub.add_parser("eval", help="accuracy and confusion matrix")
    with_run(sp)
    sp.add_argument("--model", required=True, help="int8 model or supernet checkpoint")
    sp.add_argument("--spec", help="subnet to extract when --model is a checkpoint")
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("mfcc", help="MFCC features of one WAV file as CSV")
    sp.add_argument("--wav", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_mfcc)

    sp = sub.add_parser("cost", help="MAC/parameter/byte report")
    sp.add_argument("--spec", help="spec JSON (default: the maximal subnet)")
    sp.add_argument("--config", help="run config JSON supplying the supernet shape")
    sp.add_argument("--n-classes", type=int)
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("export", help="write the int8 model binary")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export)
    return p


def _thread_limit():
    if "KWS_THREADS" in os.environ:
        return threadpool_limits(limits=audio.n_workers())
    return contextlib.nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"foldkws {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report and exit 1
        log.debug("failure", exc_info=True)
        print(f"foldkws {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
