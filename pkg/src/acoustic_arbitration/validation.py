"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .features import N_MELS, normalize_array


def check_scenarios(X, normalize: bool = True, min_devices: int = 1, min_frames: int = 2) -> list[np.ndarray]:
    """Validate a list of per-scenario feature stacks ``(devices, frames, 64)``.

    Returns float32 copies, re-standardized per device and bin when
    ``normalize`` is set (a no-op on already normalized input).
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    if len(X) == 0:
        raise ValueError("expected at least one scenario")
    out = []
    for i, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != N_MELS:
            raise ValueError(f"scenario {i}: expected (devices, frames, {N_MELS}), got {arr.shape}")
        if arr.shape[0] < min_devices:
            raise ValueError(f"scenario {i}: needs at least {min_devices} devices, got {arr.shape[0]}")
        if arr.shape[1] < min_frames:
            raise ValueError(f"scenario {i}: needs at least {min_frames} frames, got {arr.shape[1]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"scenario {i}: non-finite feature values")
        out.append(normalize_array(arr).astype(np.float32) if normalize else arr)
    return out


def check_labels(X: list[np.ndarray], y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"expected {len(X)} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if np.any(y != np.round(y)):
            raise ValueError("labels must be device indices")
        y = y.astype(np.int64)
    for i, (x, label) in enumerate(zip(X, y)):
        if not 0 <= label < x.shape[0]:
            raise ValueError(f"scenario {i}: label {label} out of range for {x.shape[0]} devices")
    return y
