"""Run configuration: one JSON file drives every CLI command.

Schema (all sections optional except ``seed``)::

    {
      "seed": 0,
      "data": "path/to/speech_commands",      # raw dataset root (prepare)
      "cache": "path/to/examples.kwsc",        # KWSC0001 example cache
      "out_dir": "runs/a",
      "supernet": {SupernetConfig fields},
      "train": {"epochs": {"full": 30, ...}, "lr": 0.001, "momentum": 0.9,
                "batch_size": 32, "subnets_per_step": 1, "kd_weight": 1.0,
                "kd_temperature": 1.0, "augment": {AugmentSpec fields} | null},
      "search": {SearchConfig fields, plus "val_subset": 1024, "calib_batches": 2},
      "constraint": {"max_weight_bytes": 442368, "max_macs": null,
                     "kernels": null, "widths": null},
      "qat": {QATSchedule fields; "augment" as in train}
    }
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import AugmentSpec
from .network import SupernetConfig
from .quant import QATSchedule
from .search import Constraint, SearchConfig
from .supernet import TrainSchedule


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration (CLI exit code 2)."""


SECTIONS = ("seed", "data", "cache", "out_dir", "supernet", "train", "search", "constraint", "qat")
EVALUATOR_KEYS = ("val_subset", "calib_batches")


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"'{section}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    values = dict(values)
    if values.get("augment") is not None:
        values["augment"] = _build(AugmentSpec, f"{section}.augment", values["augment"])
    for key in ("kernels", "widths", "stretch_range", "shift_range_s", "noise_var_range"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}': {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


@dataclass
class RunConfig:
    seed: int
    data: str | None = None
    cache: str | None = None
    out_dir: str = "."
    supernet: SupernetConfig = field(default_factory=SupernetConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    search: SearchConfig = field(default_factory=SearchConfig)
    val_subset: int = 1024
    calib_batches: int = 2
    constraint: Constraint = field(default_factory=Constraint)
    qat: QATSchedule = field(default_factory=QATSchedule)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if not isinstance(raw.get("seed"), int) or isinstance(raw.get("seed"), bool):
            raise ConfigError("'seed' is mandatory and must be an integer")
        search = dict(raw.get("search", {}))
        extra = {k: search.pop(k) for k in EVALUATOR_KEYS if k in search}
        for k, v in extra.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"'search.{k}' must be a positive integer")
        return cls(
            seed=raw["seed"],
            data=raw.get("data"),
            cache=raw.get("cache"),
            out_dir=raw.get("out_dir", "."),
            supernet=_build(SupernetConfig, "supernet", raw.get("supernet", {})),
            train=_build(TrainSchedule, "train", raw.get("train", {})),
            search=_build(SearchConfig, "search", search),
            constraint=_build(Constraint, "constraint", raw.get("constraint", {})),
            qat=_build(QATSchedule, "qat", raw.get("qat", {})),
            **extra,
        )

    def to_dict(self) -> dict:
        search = _plain(self.search)
        search.update(val_subset=self.val_subset, calib_batches=self.calib_batches)
        return {
            "seed": self.seed,
            "data": self.data,
            "cache": self.cache,
            "out_dir": self.out_dir,
            "supernet": _plain(self.supernet),
            "train": _plain(self.train),
            "search": search,
            "constraint": _plain(self.constraint),
            "qat": _plain(self.qat),
        }

    def digest(self) -> str:
        """Hash of the canonical JSON form; stamped into every artifact."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(raw)
