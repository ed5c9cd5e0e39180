"""Log mel filterbank energies (LFBE), per-utterance normalization and the frame envelope."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

SAMPLE_RATE = 16000
FRAME_SIZE = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
N_MELS = 64
LOG_FLOOR = 1e-10
VARIANCE_FLOOR = 1e-8

CACHE_MAGIC = b"LFBE"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIHB")


@dataclass
class FeatureMatrix:
    values: np.ndarray
    frame_size: int = FRAME_SIZE
    hop: int = HOP
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] != N_MELS:
            raise ValueError(f"feature matrix must be frames x {N_MELS}, got {self.values.shape}")

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def num_frames(num_samples: int, frame_size: int = FRAME_SIZE, hop: int = HOP) -> int:
    if num_samples < frame_size:
        raise ValueError(f"need at least {frame_size} samples, got {num_samples}")
    return 1 + (num_samples - frame_size) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE, fmin: float = 0.0, fmax: float | None = None
) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=2)
def _window(frame_size):
    w = np.hanning(frame_size + 1)[:-1]  # periodic Hann
    w.setflags(write=False)
    return w


def lfbe(x, sample_rate: int = SAMPLE_RATE) -> FeatureMatrix:
    """Unnormalized log mel energies of a 16 kHz signal (``Waveform`` or array)."""
    samples = getattr(x, "samples", x)
    rate = getattr(x, "sample_rate", sample_rate)
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {rate}")
    samples = np.asarray(samples, dtype=np.float64)
    num_frames(len(samples))
    frames = sliding_window_view(samples, FRAME_SIZE)[::HOP] * _window(FRAME_SIZE)
    power = np.abs(np.fft.rfft(frames, N_FFT, axis=1)) ** 2
    energies = power @ mel_filterbank().T
    return FeatureMatrix(np.log(np.maximum(energies, LOG_FLOOR)))


def normalize(f: FeatureMatrix) -> FeatureMatrix:
    """Standardize each mel bin over the frames of one utterance."""
    values = f.values
    if values.shape[0] < 2:
        raise ValueError("normalization needs at least two frames")
    mean = values.mean(axis=0)
    var = values.var(axis=0)
    scaled = (values - mean) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    scaled[:, var < VARIANCE_FLOOR] = 0.0
    return FeatureMatrix(scaled, f.frame_size, f.hop, normalized=True)


def normalize_array(values: np.ndarray) -> np.ndarray:
    """:func:`normalize` on a raw ``(..., frames, bins)`` array."""
    mean = values.mean(axis=-2, keepdims=True)
    var = values.var(axis=-2, keepdims=True)
    out = (values - mean) / np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    return np.where(var < VARIANCE_FLOOR, 0.0, out)


def envelope(f: FeatureMatrix) -> np.ndarray:
    """Mean over the mel bins at each frame."""
    return f.values.mean(axis=1)


class LFBETransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping waveforms to (optionally normalized) LFBE arrays.

    Accepts a list of waveforms or a list of multi-device scenarios, in which
    case each output is a ``(devices, frames, 64)`` array.
    """

    def __init__(self, normalize: bool = True):
        self.normalize = normalize

    def fit(self, X, y=None):
        return self

    def _one(self, x):
        f = lfbe(x)
        return (normalize(f) if self.normalize else f).values.astype(np.float32)

    def transform(self, X):
        out = []
        for item in X:
            waves = getattr(item, "device_waveforms", None)
            if waves is not None:
                out.append(np.stack([self._one(w) for w in waves]))
            else:
                out.append(self._one(item))
        return out


def save_features(path: str | Path, f: FeatureMatrix) -> None:
    """Binary cache: fixed header then row-major float32 values."""
    values = np.ascontiguousarray(f.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, values.shape[0], values.shape[1], int(f.normalized)))
        fh.write(values.tobytes())


def load_features(path: str | Path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, frames, bins, flag = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        if version != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        if bins != N_MELS:
            raise ValueError(f"{path}: expected {N_MELS} bins, found {bins}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != frames * bins:
        raise ValueError(f"{path}: payload size mismatch")
    return FeatureMatrix(data.reshape(frames, bins).astype(np.float32), normalized=bool(flag))
