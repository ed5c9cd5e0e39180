"""Per-device recordings: leveled sources convolved with room responses and mixed."""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, fftconvolve, lfilter, resample_poly, sosfilt

from .rir import RoomImpulseResponse, synthesize_rirs
from .scenes import SceneSpec

SAMPLE_RATE = 16000
DURATION = 2.0
REFERENCE_SPL = 94.0  # dB SPL that maps to unit RMS
NOISE_KINDS = ("white", "pink", "speech_shaped")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class ArbitrationScenario:
    """Recordings of one utterance by every device in a scene."""

    scene: SceneSpec
    device_waveforms: list[Waveform]
    label: int
    duration: float = DURATION

    def __post_init__(self):
        if len(self.device_waveforms) != self.scene.num_devices:
            raise ValueError("one waveform per device is required")
        lengths = {len(w) for w in self.device_waveforms}
        if len(lengths) > 1:
            raise ValueError(f"device waveforms differ in length: {sorted(lengths)}")
        if self.label != self.scene.label:
            raise ValueError("scenario label must equal the scene label")

    @property
    def num_devices(self) -> int:
        return len(self.device_waveforms)

    def as_array(self) -> np.ndarray:
        return np.stack([w.samples for w in self.device_waveforms])

    def unlabeled(self) -> "UnlabeledScenario":
        return UnlabeledScenario(tuple(self.device_waveforms))


@dataclass(frozen=True)
class UnlabeledScenario:
    """Label-free view handed to pretraining."""

    device_waveforms: tuple[Waveform, ...]


def convolve(x: Waveform, rir: RoomImpulseResponse) -> Waveform:
    """Linear convolution trimmed to ``len(x) + ceil(rt60 * fs)`` samples."""
    if x.sample_rate != rir.sample_rate:
        raise ValueError(f"sample rate mismatch: {x.sample_rate} vs {rir.sample_rate}")
    y = fftconvolve(x.samples, rir.taps)
    keep = len(x) + int(np.ceil(rir.rt60_target * x.sample_rate))
    return Waveform(y[:keep], x.sample_rate)


def set_level(x: Waveform, level_spl: float) -> Waveform:
    """Scale ``x`` so its RMS equals ``10 ** ((level_spl - 94) / 20)``."""
    rms = x.rms()
    if rms == 0.0:
        raise ValueError("cannot set the level of a silent signal")
    target = 10.0 ** ((level_spl - REFERENCE_SPL) / 20.0)
    return Waveform(x.samples * (target / rms), x.sample_rate)


def _resonator(freq, bandwidth, fs):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2 * np.pi * freq / fs
    return [1 - r], [1.0, -2 * r * np.cos(theta), r * r]


def synthetic_speech(duration: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Speech-like signal: glottal pulses through moving formants, plus fricative bursts.

    Syllables are voiced segments whose pitch and formants drift; short
    band-limited noise bursts stand in for fricatives. The result is band
    limited to 100-4000 Hz.
    """
    n = int(round(duration * sample_rate))
    out = np.zeros(n)
    t_cursor = rng.uniform(0.05, 0.2)
    end = duration - 0.15
    while t_cursor < end:
        syl = rng.uniform(0.12, 0.3)
        start = int(t_cursor * sample_rate)
        stop = min(int((t_cursor + syl) * sample_rate), n)
        length = stop - start
        if length < 64:
            break
        f0 = rng.uniform(90, 220) * np.linspace(1.0, rng.uniform(0.8, 1.2), length)
        phase = np.cumsum(f0 / sample_rate)
        pulses = np.diff(np.floor(phase), prepend=0.0)
        voiced = np.zeros(length)
        for f_lo, f_hi, bw in ((300, 900, 80), (900, 2400, 120), (2200, 3200, 180)):
            # one formant, interpolated across two halves of the syllable
            fa, fb = rng.uniform(f_lo, f_hi, size=2)
            half = length // 2
            for seg, fc in ((slice(0, half), fa), (slice(half, length), fb)):
                b, a = _resonator(fc, bw, sample_rate)
                voiced[seg] += lfilter(b, a, pulses[seg])
        envelope = np.sin(np.linspace(0, np.pi, length)) ** 2
        out[start:stop] += voiced * envelope
        if rng.random() < 0.5:
            blen = min(int(rng.uniform(0.04, 0.1) * sample_rate), n - stop)
            if blen > 16:
                burst = rng.standard_normal(blen) * np.hanning(blen) * rng.uniform(0.05, 0.2)
                out[stop:stop + blen] += sosfilt(butter(4, (2000, 3800), "bandpass", fs=sample_rate, output="sos"), burst)
        t_cursor += syl + rng.uniform(0.02, 0.12)
    out = sosfilt(butter(4, (100, 4000), "bandpass", fs=sample_rate, output="sos"), out)
    if not np.any(out):
        out[: min(n, 160)] = rng.standard_normal(min(n, 160)) * 1e-3
    return out


def synthetic_noise(kind: str, duration: float, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = int(round(duration * sample_rate))
    white = rng.standard_normal(n)
    if kind == "white":
        return white
    spectrum = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    if kind == "pink":
        spectrum[1:] /= np.sqrt(f[1:])
        spectrum[0] = 0.0
    elif kind == "speech_shaped":
        # flat to 500 Hz, then about -9 dB per octave
        spectrum *= 1.0 / (1.0 + (f / 500.0) ** 1.5)
        spectrum[f < 60] = 0.0
    else:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return np.fft.irfft(spectrum, n)


def load_wav(path: str | Path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a mono WAV file and resample it to ``sample_rate``."""
    try:
        fs, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    elif np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if fs != sample_rate:
        g = gcd(int(fs), int(sample_rate))
        data = resample_poly(data, sample_rate // g, fs // g)
    return Waveform(data, sample_rate)


def generate_source_audio(
    kind: str = "synthetic_speech",
    duration: float = DURATION,
    rng: np.random.Generator | None = None,
    path: str | Path | None = None,
    sample_rate: int = SAMPLE_RATE,
) -> Waveform:
    """Source utterance, either synthesized (``synthetic_speech``) or loaded (``file``)."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if kind == "synthetic_speech":
        rng = rng if rng is not None else np.random.default_rng()
        return Waveform(synthetic_speech(duration, rng, sample_rate), sample_rate)
    if kind == "file":
        if path is None:
            raise ValueError("kind='file' requires a path")
        return load_wav(path, sample_rate)
    raise ValueError(f"unknown source kind {kind!r}")


RIRProvider = Callable[..., Sequence[RoomImpulseResponse]]


def render_scenario(
    scene: SceneSpec,
    speech: Waveform,
    noises: Sequence[Waveform],
    rir_provider: RIRProvider = synthesize_rirs,
    duration: float = DURATION,
) -> ArbitrationScenario:
    """Mix leveled speech and noise at every device of ``scene``.

    ``rir_provider(room_dims, source, mics, rt60, sample_rate)`` returns one
    response per mic. Device signals are cut or zero-padded to ``duration``.
    """
    if len(noises) != len(scene.noise_positions):
        raise ValueError(f"expected {len(scene.noise_positions)} noise signals, got {len(noises)}")
    fs = speech.sample_rate
    total = int(round(duration * fs))
    mixes = [np.zeros(total) for _ in range(scene.num_devices)]

    def add(source_wave, position):
        rirs = rir_provider(scene.room_dims, position, scene.device_positions, scene.rt60, fs)
        for mix, rir in zip(mixes, rirs):
            y = convolve(source_wave, rir).samples[:total]
            mix[: len(y)] += y

    add(set_level(speech, scene.speech_level), scene.speaker_position)
    for noise, position in zip(noises, scene.noise_positions):
        add(set_level(noise, scene.noise_level), position)
    return ArbitrationScenario(scene, [Waveform(m, fs) for m in mixes], scene.label, duration)


def scene_sources(scene: SceneSpec, duration: float = DURATION, sample_rate: int = SAMPLE_RATE):
    """Deterministic speech and noise signals for ``scene``, drawn from its seed."""
    rng = np.random.default_rng([scene.seed, 1])
    speech = generate_source_audio("synthetic_speech", duration, rng, sample_rate=sample_rate)
    noises = []
    for _ in scene.noise_positions:
        kind = NOISE_KINDS[int(rng.integers(len(NOISE_KINDS)))]
        noises.append(Waveform(synthetic_noise(kind, duration, rng, sample_rate), sample_rate))
    return speech, noises


def simulate_scenario(scene: SceneSpec, duration: float = DURATION, rir_provider: RIRProvider = synthesize_rirs) -> ArbitrationScenario:
    speech, noises = scene_sources(scene, duration)
    return render_scenario(scene, speech, noises, rir_provider, duration)


# -- dataset files ---------------------------------------------------------

def write_scenario(directory: str | Path, name: str, scenario: ArbitrationScenario, layout: str = "per_device") -> dict:
    """Write a scenario's audio and return its manifest record (paths relative to ``directory``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fs = scenario.device_waveforms[0].sample_rate
    if layout == "per_device":
        paths = []
        for d, w in enumerate(scenario.device_waveforms):
            rel = f"{name}_dev{d:02d}.wav"
            wavfile.write(directory / rel, fs, w.samples.astype(np.float32))
            paths.append(rel)
        audio = paths
    elif layout == "multichannel":
        rel = f"{name}.wav"
        wavfile.write(directory / rel, fs, scenario.as_array().T.astype(np.float32))
        audio = rel
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return {"scene": scenario.scene.to_dict(), "audio": audio, "label": scenario.label, "duration": scenario.duration}


def read_scenario(directory: str | Path, record: dict) -> ArbitrationScenario:
    """Inverse of :func:`write_scenario`; accepts both layouts."""
    directory = Path(directory)
    scene = SceneSpec.from_dict(record["scene"])
    audio = record["audio"]
    if isinstance(audio, str):
        fs, data = wavfile.read(directory / audio)
        data = np.atleast_2d(data.T) if data.ndim == 2 else data[None, :]
        waves = [Waveform(ch.astype(np.float64), fs) for ch in data]
    else:
        waves = []
        for rel in audio:
            fs, data = wavfile.read(directory / rel)
            waves.append(Waveform(data.astype(np.float64), fs))
    return ArbitrationScenario(scene, waves, int(record["label"]), float(record.get("duration", DURATION)))


def write_dataset(directory: str | Path, scenarios: Iterable[ArbitrationScenario], layout: str = "per_device", prefix: str = "scn") -> Path:
    """Write audio plus ``manifest.jsonl``; ``scenarios`` may be a generator."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, scenario in enumerate(scenarios):
            fh.write(json.dumps(write_scenario(directory, f"{prefix}{i:06d}", scenario, layout), sort_keys=True) + "\n")
    return manifest


def iter_dataset(directory: str | Path) -> Iterator[ArbitrationScenario]:
    """Scenarios of a dataset directory, read one at a time."""
    directory = Path(directory)
    with open(directory / "manifest.jsonl") as fh:
        for line in fh:
            if line.strip():
                yield read_scenario(directory, json.loads(line))


def read_dataset(directory: str | Path) -> list[ArbitrationScenario]:
    return list(iter_dataset(directory))
