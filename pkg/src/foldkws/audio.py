"""Speech Commands ingestion, augmentation and the raw-audio fold.

A 1.024 s window (16384 samples at 16 kHz) is folded into a 128 x 128 grid:
channel ``c`` holds samples ``[128c, 128c + 128)``, so a 1-D convolution runs
over adjacent samples while the channel axis spans 128-sample strides.
"""

from __future__ import annotations

import io
import json
import logging
import os
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW = 16384
FOLD = 128

KEYWORDS = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
ALL_WORDS = KEYWORDS + (
    "backward", "bed", "bird", "cat", "dog", "eight", "five", "follow", "forward", "four",
    "happy", "house", "learn", "marvin", "nine", "one", "seven", "sheila", "six", "three",
    "tree", "two", "visual", "wow", "zero",
)
SILENCE = "_silence_"
BACKGROUND_DIR = "_background_noise_"


class WavFormatError(ValueError):
    pass


# -- labels --------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Keyword classes first, then Silence, then Unknown."""

    keywords: tuple[str, ...] = KEYWORDS

    @property
    def n_classes(self) -> int:
        return len(self.keywords) + 2

    @property
    def silence(self) -> int:
        return len(self.keywords)

    @property
    def unknown(self) -> int:
        return len(self.keywords) + 1

    @property
    def class_names(self) -> list[str]:
        return [*self.keywords, "silence", "unknown"]

    def label(self, word: str) -> int:
        word = word.lower()
        if word in (SILENCE, "silence", BACKGROUND_DIR):
            return self.silence
        if word in self.keywords:
            return self.keywords.index(word)
        return self.unknown


def relabel_12(word: str) -> int:
    return Vocabulary().label(word)


# -- WAV -----------------------------------------------------------------------


def parse_wav(data: bytes) -> np.ndarray:
    """Decode 16-bit PCM mono 16 kHz RIFF/WAVE bytes to float32 in [-1, 1)."""
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"not a PCM RIFF/WAVE stream: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"sample rate {rate} Hz, expected {SAMPLE_RATE}")
    if channels != 1:
        raise WavFormatError(f"{channels} channels, expected mono")
    if width != 2:
        raise WavFormatError(f"{8 * width}-bit samples, expected 16-bit PCM")
    return np.frombuffer(frames, dtype="<i2").astype(np.float32) / 32768.0


def read_wav(path) -> np.ndarray:
    return parse_wav(Path(path).read_bytes())


def encode_wav(samples: np.ndarray) -> bytes:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


# -- index and splits ----------------------------------------------------------


@dataclass
class IndexEntry:
    path: str
    keyword: str
    label: int
    speaker: str
    split: str = ""


@dataclass
class DatasetIndex:
    entries: list[IndexEntry] = field(default_factory=list)
    errors: int = 0

    def __len__(self):
        return len(self.entries)

    def speakers(self) -> set[str]:
        return {e.speaker for e in self.entries}

    def split(self, name: str) -> list[IndexEntry]:
        return [e for e in self.entries if e.split == name]


def parse_clip_name(relpath: str) -> tuple[str, str]:
    """``yes/abc_nohash_0.wav`` -> ("yes", "abc")."""
    keyword, fname = relpath.replace("\\", "/").split("/")[-2:]
    return keyword, fname.split("_nohash_")[0]


def build_index(root, vocab: Vocabulary = Vocabulary()) -> DatasetIndex:
    root = Path(root)
    index = DatasetIndex()
    if not root.is_dir():
        return index
    for kw_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if kw_dir.name.startswith("_"):
            continue
        for wav in sorted(kw_dir.glob("*.wav")):
            rel = f"{kw_dir.name}/{wav.name}"
            try:
                with wave.open(str(wav), "rb"):
                    pass
            except (wave.Error, EOFError, OSError):
                index.errors += 1
                continue
            keyword, speaker = parse_clip_name(rel)
            index.entries.append(IndexEntry(rel, keyword, vocab.label(keyword), speaker))
    if index.errors:
        log.warning("skipped %d unreadable files under %s", index.errors, root)
    return index


def fnv1a_32(text: str) -> int:
    h = 0x811C9DC5
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def split_of(speaker: str) -> str:
    bucket = fnv1a_32(speaker) % 100
    return "train" if bucket < 80 else "val" if bucket < 90 else "test"


def assign_split(index: DatasetIndex, root=None) -> DatasetIndex:
    """Speaker-hash 80:10:10 split; official list files override when present."""
    official = {}
    if root is not None:
        for name, fname in (("val", "validation_list.txt"), ("test", "testing_list.txt")):
            path = Path(root) / fname
            if path.exists():
                for line in path.read_text().split():
                    official[line.strip()] = name
    use_official = bool(official)
    for e in index.entries:
        if use_official:
            e.split = official.get(e.path, "train")
        else:
            e.split = split_of(e.speaker)
    return index


# -- window / augmentation ----------------------------------------------------


def pad_to_window(samples: np.ndarray, window: int = WINDOW) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float32)
    n = len(samples)
    if n == window:
        return samples
    if n > window:
        start = (n - window) // 2
        return samples[start : start + window]
    front = (window - n) // 2
    return np.pad(samples, (front, window - n - front))


def resample_linear(samples: np.ndarray, factor: float) -> np.ndarray:
    """Linear-interpolation resample to ``round(len / factor)`` samples, endpoints aligned."""
    if factor <= 0:
        raise ValueError("stretch factor must be positive")
    samples = np.asarray(samples, dtype=np.float32)
    n = len(samples)
    m = max(int(round(n / factor)), 1)
    if m == n:
        return samples
    pos = np.arange(m) * ((n - 1) / max(m - 1, 1))
    return np.interp(pos, np.arange(n), samples).astype(np.float32)


def stretch(samples: np.ndarray, factor: float) -> np.ndarray:
    """Time-stretch (factor > 1 speeds speech up) and re-window to 16384 samples."""
    return pad_to_window(resample_linear(samples, factor))


def shift(samples: np.ndarray, t_seconds: float) -> np.ndarray:
    """Delay (t > 0) or advance (t < 0) by ``round(t * 16000)`` samples, zero filled."""
    samples = np.asarray(samples, dtype=np.float32)
    s = int(round(t_seconds * SAMPLE_RATE))
    out = np.zeros_like(samples)
    if s >= 0:
        out[s:] = samples[: len(samples) - s]
    else:
        out[:s] = samples[-s:]
    return out


def add_noise(samples: np.ndarray, variance: float, seed) -> np.ndarray:
    if variance < 0:
        raise ValueError("noise variance must be non-negative")
    if variance == 0:
        return np.asarray(samples, dtype=np.float32).copy()
    rng = np.random.default_rng(seed)
    return (samples + rng.normal(0.0, np.sqrt(variance), size=len(samples))).astype(np.float32)


@dataclass(frozen=True)
class AugmentSpec:
    stretch_range: tuple[float, float] = (0.8, 1.3)
    shift_range_s: tuple[float, float] = (-0.1, 0.1)
    noise_var_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("stretch_range", "shift_range_s", "noise_var_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {lo} > {hi}")
        if self.stretch_range[0] <= 0:
            raise ValueError("stretch factors must be positive")
        if self.noise_var_range[0] < 0:
            raise ValueError("noise variance lower bound must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentSpec":
        return cls((1.0, 1.0), (0.0, 0.0), (0.0, 0.0))


def draw_augment(spec: AugmentSpec, sample_seed) -> tuple[float, float, float, int]:
    """(stretch factor, shift seconds, noise variance, noise seed) for one example."""
    rng = np.random.default_rng([spec.seed, *np.atleast_1d(sample_seed)])
    factor = rng.uniform(*spec.stretch_range)
    t = rng.uniform(*spec.shift_range_s)
    var = rng.uniform(*spec.noise_var_range)
    return float(factor), float(t), float(var), int(rng.integers(2**63))


def augment(samples: np.ndarray, spec: AugmentSpec, sample_seed) -> np.ndarray:
    """Stretch, then shift, then add noise; pure in (samples, spec, sample_seed)."""
    factor, t, var, noise_seed = draw_augment(spec, sample_seed)
    out = stretch(pad_to_window(samples), factor)
    out = shift(out, t)
    return add_noise(out, var, noise_seed)


def make_silence(recordings, count: int, seed: int, window: int = WINDOW) -> np.ndarray:
    """Random window-length crops of background recordings, each scaled by U(0, 1)."""
    recordings = [np.asarray(r, dtype=np.float32) for r in recordings]
    if not recordings:
        raise ValueError("no background recordings")
    for r in recordings:
        if len(r) < window:
            raise ValueError(f"background recording of {len(r)} samples is shorter than {window}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, window), dtype=np.float32)
    for i in range(count):
        rec = recordings[rng.integers(len(recordings))]
        start = rng.integers(len(rec) - window + 1)
        out[i] = rec[start : start + window] * np.float32(rng.uniform(0.0, 1.0))
    return out


def class_weights(train_labels, n_classes: int = 12, unknown: int | None = 11) -> np.ndarray:
    """All ones except Unknown, scaled down to the mean count of the other classes."""
    counts = np.bincount(np.asarray(train_labels, dtype=np.int64), minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes with no training samples: {missing}")
    w = np.ones(n_classes, dtype=np.float32)
    if unknown is not None:
        others = np.delete(counts, unknown).mean()
        w[unknown] = min(1.0, others / counts[unknown])
    return w


# -- fold ---------------------------------------------------------------------------


def fold(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples)
    if samples.shape[-1] != WINDOW:
        raise ValueError(f"fold expects {WINDOW} samples, got {samples.shape[-1]}")
    return samples.reshape(*samples.shape[:-1], FOLD, FOLD)


def unfold(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    return grid.reshape(*grid.shape[:-2], FOLD * FOLD)


# -- example cache -----------------------------------------------------------------

CACHE_MAGIC = b"KWSC0001"
RECORD = np.dtype([("label", "u1"), ("samples", "<f4", (WINDOW,))])


def write_cache(path, labels, samples) -> None:
    samples = np.asarray(samples, dtype=np.float32)
    labels = np.asarray(labels)
    if samples.shape != (len(labels), WINDOW):
        raise ValueError(f"cache samples must be (n, {WINDOW}), got {samples.shape}")
    rec = np.empty(len(labels), dtype=RECORD)
    rec["label"] = labels
    rec["samples"] = samples
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(rec.tobytes())


def read_cache(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a KWSC0001 example cache")
    rec = np.memmap(path, dtype=RECORD, mode="r", offset=len(CACHE_MAGIC))
    return np.asarray(rec["label"], dtype=np.int64), rec["samples"]


@dataclass
class Dataset:
    """Padded clips with labels and the split each record belongs to."""

    samples: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    class_names: list[str]
    unknown: int | None = None
    speakers: list[str] | None = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        mask = self.splits == split
        return np.asarray(self.samples[mask]), self.labels[mask]

    def save(self, cache_path, extra: dict | None = None) -> Path:
        write_cache(cache_path, self.labels, self.samples)
        report = {
            "class_names": self.class_names,
            "unknown": self.unknown,
            "splits": self.splits.tolist(),
            "counts": {s: np.bincount(self.labels[self.splits == s], minlength=self.n_classes).tolist()
                       for s in ("train", "val", "test")},
            **(extra or {}),
        }
        report_path = Path(str(cache_path) + ".index.json")
        report_path.write_text(json.dumps(report, indent=1))
        return report_path

    @classmethod
    def load(cls, cache_path) -> "Dataset":
        labels, samples = read_cache(cache_path)
        report = json.loads(Path(str(cache_path) + ".index.json").read_text())
        return cls(samples, labels, np.asarray(report["splits"]), report["class_names"], report.get("unknown"))


def synthetic_tones(n_classes: int, n_per_class: int, seed: int, clips_per_speaker: int = 4) -> Dataset:
    """Class-distinct multi-tone clips (1 s, padded) for desk-scale runs.

    Each class owns three partials on its own frequency ladder; every clip
    jitters the frequencies by up to 3%, randomizes phases and amplitude, and
    adds a little white noise. Consecutive clips share a synthetic speaker.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
    labels, clips, speakers = [], [], []
    for c in range(n_classes):
        base = 150.0 * (1.6 ** c)
        partials = base * np.array([1.0, 2.3, 3.7])
        for i in range(n_per_class):
            f = partials * rng.uniform(0.97, 1.03, size=3)
            ph = rng.uniform(0, 2 * np.pi, size=3)
            amp = rng.uniform(0.2, 0.5)
            onset = rng.uniform(0.05, 0.3)
            env = np.clip((t - onset) / 0.05, 0, 1) * np.clip((onset + 0.6 - t) / 0.05, 0, 1)
            x = amp * env * np.sin(2 * np.pi * f[:, None] * t + ph[:, None]).sum(0) / 3
            x = x + rng.normal(0, 0.01, size=t.shape)
            clips.append(pad_to_window(x.astype(np.float32)))
            labels.append(c)
            speakers.append(f"synth{c:02d}{i // clips_per_speaker:04d}")
    splits = np.array([split_of(s) for s in speakers])
    return Dataset(np.stack(clips), np.array(labels), splits, [f"tone{c}" for c in range(n_classes)], None, speakers)


def load_speech_commands(root, seed: int = 0, vocab: Vocabulary = Vocabulary()) -> Dataset:
    """Index, split and decode a Speech Commands v2 tree, adding Silence clips."""
    root = Path(root)
    index = assign_split(build_index(root, vocab), root)
    if not index.entries:
        raise FileNotFoundError(f"no Speech Commands clips under {root}")
    bg_dir = root / BACKGROUND_DIR
    background = [read_wav(p) for p in sorted(bg_dir.glob("*.wav"))] if bg_dir.is_dir() else []

    samples, labels, splits = [], [], []
    for e in index.entries:
        samples.append(pad_to_window(read_wav(root / e.path)))
        labels.append(e.label)
        splits.append(e.split)
    labels_a = np.array(labels)
    splits_a = np.array(splits)
    if background:
        for k, split in enumerate(("train", "val", "test")):
            mask = (splits_a == split) & (labels_a < len(vocab.keywords))
            n = int(round(mask.sum() / len(vocab.keywords)))
            sil = make_silence(background, n, seed + k)
            samples.extend(sil)
            labels.extend([vocab.silence] * n)
            splits.extend([split] * n)
    return Dataset(np.stack(samples), np.array(labels), np.array(splits), vocab.class_names, vocab.unknown)


def index_to_json(index: DatasetIndex) -> str:
    return json.dumps({"errors": index.errors, "entries": [asdict(e) for e in index.entries]})


def n_workers() -> int:
    return int(os.environ.get("KWS_THREADS", os.cpu_count() or 1))
