"""Reference MFCC front end (40 coefficients, 40 ms frames, 20 ms hop).

Only used for cost comparison and regression fixtures; the classifier
consumes folded raw audio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import SAMPLE_RATE


@dataclass(frozen=True)
class MfccConfig:
    n_mfcc: int = 40
    frame_len: int = 640
    stride: int = 320
    n_fft: int = 1024
    n_mels: int = 40
    f_min: float = 0.0
    f_max: float = 8000.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len > self.n_fft:
            raise ValueError("frame_len must not exceed n_fft")
        if self.n_mfcc > self.n_mels:
            raise ValueError("n_mfcc must not exceed n_mels")

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.frame_len) // self.stride + 1


def hamming(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(n) / (n - 1))


def frame_signal(samples, config: MfccConfig = MfccConfig(), window: bool = True) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < config.frame_len:
        raise ValueError(f"signal of {len(samples)} samples is shorter than one frame ({config.frame_len})")
    n = config.n_frames(len(samples))
    idx = np.arange(config.frame_len)[None, :] + config.stride * np.arange(n)[:, None]
    frames = samples[idx]
    return frames * hamming(config.frame_len) if window else frames


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x, n: int | None = None) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT along the last axis (zero padded to n)."""
    x = np.asarray(x)
    n = n or x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT size {n} is not a power of two")
    if x.shape[-1] < n:
        x = np.concatenate([x, np.zeros((*x.shape[:-1], n - x.shape[-1]))], axis=-1)
    lead = x.shape[:-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        a = a.reshape(*lead, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1).reshape(*lead, n)
        size *= 2
    return a


def power_spectrum(frames, n_fft: int = 1024) -> np.ndarray:
    spec = fft(frames, n_fft)[..., : n_fft // 2 + 1]
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_weights(config: MfccConfig = MfccConfig()) -> np.ndarray:
    """(n_mels, n_fft/2 + 1) unit-peak triangular filters, centers uniform in mel."""
    edges = mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    w = np.zeros((config.n_mels, len(freqs)))
    for j in range(config.n_mels):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        w[j] = np.clip(np.minimum(rising, falling), 0.0, None)
    return w


def mel_filterbank(spec, config: MfccConfig = MfccConfig()) -> np.ndarray:
    return np.asarray(spec) @ mel_weights(config).T


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II: ``D @ x`` transforms a length-n vector."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    d = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


def mfcc_from_mel(mel, n_mfcc: int = 40) -> np.ndarray:
    logmel = np.log(np.asarray(mel) + 1e-10)
    return (logmel @ dct_matrix(logmel.shape[-1]).T)[..., :n_mfcc]


def mfcc(samples, config: MfccConfig = MfccConfig()) -> np.ndarray:
    frames = frame_signal(samples, config)
    mel = mel_filterbank(power_spectrum(frames, config.n_fft), config)
    return mfcc_from_mel(mel, config.n_mfcc)
