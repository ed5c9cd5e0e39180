"""Scene sampling for multi-device wakeword recordings.

A scene is a shoebox room with a reverberation time, a set of devices, one
talker and a few noise sources. The ground-truth arbitration label is the
device closest to the talker.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

MAX_REJECTIONS = 10_000


class SamplingError(RuntimeError):
    """Raised when a rejection sampler exceeds its iteration cap."""


class PlacementError(SamplingError):
    """Raised when entities cannot be placed with the requested separation."""


@dataclass(frozen=True)
class ShiftedPoissonParams:
    mean: float
    low: int
    high: int

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"low ({self.low}) must not exceed high ({self.high})")
        if self.mean < self.low:
            raise ValueError(f"mean ({self.mean}) must be >= low ({self.low})")


def _check_range(name, rng):
    low, high = rng
    if low > high:
        raise ValueError(f"{name}: low ({low}) must not exceed high ({high})")


@dataclass(frozen=True)
class SamplingConfig:
    room_length_range: tuple[float, float] = (3.0, 10.0)
    room_width_range: tuple[float, float] = (3.0, 10.0)
    room_height_range: tuple[float, float] = (2.5, 6.0)
    rt60_beta_params: tuple[float, float] = (1.1, 3.0)
    device_count: ShiftedPoissonParams = field(default_factory=lambda: ShiftedPoissonParams(3, 2, 15))
    noise_count: ShiftedPoissonParams = field(default_factory=lambda: ShiftedPoissonParams(2, 1, 5))
    speech_level_range: tuple[float, float] = (55.0, 70.0)
    noise_level_range: tuple[float, float] = (50.0, 70.0)
    wall_margin: float = 0.5
    min_separation: float = 0.3
    device_height_range: tuple[float, float] = (0.5, 1.5)
    speaker_height_range: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_range"):
                _check_range(f.name, getattr(self, f.name))
        if min(self.rt60_beta_params) <= 0:
            raise ValueError("rt60 beta parameters must be positive")
        if self.wall_margin < 0 or self.min_separation < 0:
            raise ValueError("wall_margin and min_separation must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "SamplingConfig":
        """Build a config from a (possibly partial) mapping; unset keys keep defaults."""
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown sampling keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in ("device_count", "noise_count"):
                if isinstance(value, dict):
                    value = ShiftedPoissonParams(**value)
                else:
                    value = ShiftedPoissonParams(*value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "SamplingConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data.get("sampling", data))


Point = tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    room_dims: Point
    rt60: float
    device_positions: tuple[Point, ...]
    speaker_position: Point
    noise_positions: tuple[Point, ...]
    speech_level: float
    noise_level: float
    label: int
    seed: int

    @property
    def num_devices(self) -> int:
        return len(self.device_positions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room_dims"] = list(self.room_dims)
        d["device_positions"] = [list(p) for p in self.device_positions]
        d["speaker_position"] = list(self.speaker_position)
        d["noise_positions"] = [list(p) for p in self.noise_positions]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            room_dims=tuple(float(v) for v in d["room_dims"]),
            rt60=float(d["rt60"]),
            device_positions=tuple(tuple(float(v) for v in p) for p in d["device_positions"]),
            speaker_position=tuple(float(v) for v in d["speaker_position"]),
            noise_positions=tuple(tuple(float(v) for v in p) for p in d["noise_positions"]),
            speech_level=float(d["speech_level"]),
            noise_level=float(d["noise_level"]),
            label=int(d["label"]),
            seed=int(d["seed"]),
        )

    @classmethod
    def from_json(cls, line: str) -> "SceneSpec":
        return cls.from_dict(json.loads(line))


def derive_seed(global_seed: int, index: int, stream: int = 0) -> int:
    """Stable 64-bit seed for item ``index`` of a seeded stream.

    Independent of worker scheduling, so parallel generation reproduces
    sequential generation exactly.
    """
    ss = np.random.SeedSequence([int(global_seed), int(stream), int(index)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def shifted_poisson_sample(params: ShiftedPoissonParams, rng: np.random.Generator) -> int:
    """Draw ``low + Poisson(mean - low)``, rejecting draws above ``high``."""
    if params.low == params.high:
        return params.low
    lam = params.mean - params.low
    for _ in range(MAX_REJECTIONS):
        k = params.low + int(rng.poisson(lam))
        if k <= params.high:
            return k
    raise SamplingError(f"shifted Poisson rejection exceeded {MAX_REJECTIONS} draws for {params}")


def assign_label(device_positions: Sequence[Sequence[float]], speaker_position: Sequence[float]) -> int:
    """Index of the device closest to the speaker; lowest index wins ties."""
    devices = np.asarray(device_positions, dtype=float)
    if devices.size == 0:
        raise ValueError("at least one device is required")
    devices = devices.reshape(-1, 3)
    d = np.linalg.norm(devices - np.asarray(speaker_position, dtype=float), axis=1)
    # argmin returns the first occurrence
    return int(np.argmin(d))


def _place(rng, low, high, placed, min_sep):
    # same doubles and arithmetic as rng.uniform(low, high), without its argument checks
    for _ in range(MAX_REJECTIONS):
        u = rng.random(3).tolist()
        p = tuple(lo + (hi - lo) * v for lo, hi, v in zip(low, high, u))
        if all(math.dist(p, q) >= min_sep for q in placed):
            return p
    raise PlacementError(
        f"could not place entity with min_separation={min_sep} after {MAX_REJECTIONS} attempts"
    )


def _height_bounds(room_h, margin, wanted):
    lo = max(wanted[0], margin)
    hi = min(wanted[1], room_h - margin)
    if lo > hi:
        # clamp window falls outside the usable room; use the usable slab
        lo, hi = margin, room_h - margin
    return lo, hi


def sample_scene(config: SamplingConfig, seed: int) -> SceneSpec:
    """Sample one arbitration scene; a pure function of ``(config, seed)``."""
    rng = np.random.default_rng(seed)
    length = rng.uniform(*config.room_length_range)
    width = rng.uniform(*config.room_width_range)
    height = rng.uniform(*config.room_height_range)
    m = config.wall_margin
    if min(length, width, height) <= 2 * m:
        raise PlacementError(f"room {length:.2f}x{width:.2f}x{height:.2f} too small for wall_margin={m}")

    rt60 = 0.0
    while rt60 <= 0.0:
        rt60 = float(rng.beta(*config.rt60_beta_params))
    n_dev = shifted_poisson_sample(config.device_count, rng)
    n_noise = shifted_poisson_sample(config.noise_count, rng)
    speech_level = float(rng.uniform(*config.speech_level_range))
    noise_level = float(rng.uniform(*config.noise_level_range))

    def bounds(z_range):
        z_lo, z_hi = _height_bounds(height, m, z_range)
        return (m, m, z_lo), (length - m, width - m, z_hi)

    placed: list[tuple] = []
    sep = config.min_separation
    speaker = _place(rng, *bounds(config.speaker_height_range), placed, sep)
    placed.append(speaker)
    devices = []
    device_bounds = bounds(config.device_height_range)
    for _ in range(n_dev):
        p = _place(rng, *device_bounds, placed, sep)
        placed.append(p)
        devices.append(p)
    noises = []
    full = ((m, m, m), (length - m, width - m, height - m))
    for _ in range(n_noise):
        p = _place(rng, *full, placed, sep)
        placed.append(p)
        noises.append(p)

    return SceneSpec(
        room_dims=(float(length), float(width), float(height)),
        rt60=rt60,
        device_positions=tuple(devices),
        speaker_position=speaker,
        noise_positions=tuple(noises),
        speech_level=speech_level,
        noise_level=noise_level,
        label=assign_label(devices, speaker),
        seed=int(seed),
    )


def sample_scenes(config: SamplingConfig, global_seed: int, count: int, stream: int = 0) -> list[SceneSpec]:
    return [sample_scene(config, derive_seed(global_seed, i, stream)) for i in range(count)]


def write_manifest(path: str | Path, scenes: Iterable[SceneSpec]) -> None:
    """Write scenes as JSON lines."""
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(scene.to_json() + "\n")


def read_manifest(path: str | Path) -> list[SceneSpec]:
    with open(path) as fh:
        return [SceneSpec.from_json(line) for line in fh if line.strip()]
