"""Dataset-size sweep: generate data, pretrain, finetune on nested subsets, report."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .estimators import OBJECTIVES, AcousticPretrainer, DeviceArbitrationClassifier
from .features import lfbe, normalize
from .nn import Checkpoint, EncoderConfig
from .objectives import relative_error_rate
from .scenes import SamplingConfig, SceneSpec, derive_seed, sample_scene
from .synth import DURATION, simulate_scenario

log = logging.getLogger(__name__)

SETUPS = ("baseline",) + OBJECTIVES
WORKERS_ENV = "ARBITRATION_WORKERS"
TRAIN_STREAM, TEST_STREAM = 0, 1
REPORT_COLUMNS = ("setup", "subset_size", "seed", "accuracy", "relative_error_rate", "checkpoint_path")


@dataclass
class OptimConfig:
    n_steps: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    eval_interval: int = 25


@dataclass
class ExperimentConfig:
    total_scenarios: int = 2000
    subset_exponents: tuple[int, ...] = (0, 1, 2, 3)
    setups: tuple[str, ...] = SETUPS
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 1234
    test_scenarios: int = 500
    validation_fraction: float = 0.1
    duration: float = DURATION
    lam: float = 0.5
    split_jitter: float = 0.05
    pretrain: OptimConfig = field(default_factory=lambda: OptimConfig(n_steps=600, eval_interval=50))
    finetune: OptimConfig = field(default_factory=OptimConfig)
    model: dict = field(default_factory=dict)
    sampling: dict = field(default_factory=dict)
    out_dir: str = "runs/sweep"

    def __post_init__(self):
        self.subset_exponents = tuple(int(e) for e in self.subset_exponents)
        self.setups = tuple(self.setups)
        self.seeds = tuple(int(s) for s in self.seeds)
        for name in ("pretrain", "finetune"):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, OptimConfig(**value))
        unknown = set(self.setups) - set(SETUPS)
        if unknown:
            raise ValueError(f"unknown setups {sorted(unknown)}; choose from {SETUPS}")
        if not self.subset_exponents:
            raise ValueError("at least one subset exponent is required")
        if self.total_scenarios < 4 ** max(self.subset_exponents):
            raise ValueError("total_scenarios must be at least 4 ** max(subset_exponents)")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5]")
        EncoderConfig.from_dict(self.model)
        SamplingConfig.from_dict(self.sampling)

    @property
    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig.from_dict(self.sampling)

    @property
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("subset_exponents", "setups", "seeds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


@dataclass
class Dataset:
    """Normalized LFBE stacks with labels and the scenes they came from."""

    features: list[np.ndarray]
    labels: np.ndarray
    scenes: list[SceneSpec]

    def __len__(self):
        return len(self.features)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset([self.features[i] for i in idx], self.labels[idx], [self.scenes[i] for i in idx])

    def unlabeled(self) -> list[np.ndarray]:
        """Feature stacks only; what pretraining receives."""
        return list(self.features)

    def save(self, path: str | Path) -> None:
        arrays = {f"f{i}": f for i, f in enumerate(self.features)}
        scenes = json.dumps([s.to_dict() for s in self.scenes])
        with open(path, "wb") as fh:
            np.savez(fh, labels=self.labels, scenes=np.frombuffer(scenes.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with np.load(path) as data:
            labels = data["labels"]
            scenes = [SceneSpec.from_dict(d) for d in json.loads(data["scenes"].tobytes().decode())]
            feats = [data[f"f{i}"] for i in range(len(labels))]
        return cls(feats, labels, scenes)


def scenario_features(scenario) -> np.ndarray:
    return np.stack([normalize(lfbe(w)).values for w in scenario.device_waveforms]).astype(np.float32)


def _render_one(args):
    scene, duration = args
    return scenario_features(simulate_scenario(scene, duration))


def worker_count() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def generate_dataset(sampling: SamplingConfig, data_seed: int, count: int, stream: int = TRAIN_STREAM, duration: float = DURATION) -> Dataset:
    """Sample and render ``count`` scenarios; identical for any worker count."""
    scenes = [sample_scene(sampling, derive_seed(data_seed, i, stream)) for i in range(count)]
    jobs = [(s, duration) for s in scenes]
    workers = worker_count()
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            feats = list(pool.map(_render_one, jobs, chunksize=8))
    else:
        feats = [_render_one(j) for j in jobs]
    return Dataset(feats, np.array([s.label for s in scenes], dtype=np.int64), scenes)


def subset_sizes(total: int, exponents: Sequence[int]) -> list[int]:
    """``floor(total / 4**i)`` for each exponent."""
    if total < 1:
        raise ValueError("total must be positive")
    sizes = [total // 4**int(i) for i in exponents]
    if any(s == 0 for s in sizes):
        raise ValueError(f"subset of size 0 for total={total}, exponents={list(exponents)}")
    return sizes


def nested_subsets(total: int, sizes: Sequence[int], seed: int) -> dict[int, np.ndarray]:
    """Prefixes of one seeded shuffle, so each smaller subset lies inside every larger one."""
    order = np.random.default_rng([seed, 7]).permutation(total)
    return {s: np.sort(order[:s]) for s in sizes}


def pretrain(setup: str, data: Sequence[np.ndarray], config: ExperimentConfig, seed: int) -> Checkpoint:
    """Self-supervised pretraining on unlabeled feature stacks; best validation checkpoint."""
    if setup not in OBJECTIVES:
        raise ValueError(f"pretraining setup must be one of {OBJECTIVES}")
    opt = config.pretrain
    est = AcousticPretrainer(
        objective=setup, lam=config.lam, encoder_config=config.model, n_steps=opt.n_steps,
        batch_size=opt.batch_size, learning_rate=opt.learning_rate,
        validation_fraction=config.validation_fraction, eval_interval=opt.eval_interval,
        split_jitter=config.split_jitter, random_state=seed,
    )
    return est.fit(list(data)).to_checkpoint()


def finetune(init: Checkpoint | None, subset: Dataset, config: ExperimentConfig, seed: int) -> Checkpoint:
    """End-to-end cross-entropy training; best validation checkpoint."""
    if len(subset) == 0:
        raise ValueError("cannot finetune on an empty subset")
    opt = config.finetune
    clf = DeviceArbitrationClassifier(
        encoder_config=config.model, init_checkpoint=init, n_steps=opt.n_steps,
        batch_size=opt.batch_size, learning_rate=opt.learning_rate,
        validation_fraction=config.validation_fraction, eval_interval=opt.eval_interval,
        random_state=seed,
    )
    return clf.fit(subset.features, subset.labels).to_checkpoint()


def evaluate(model, test: Dataset) -> float:
    """Fraction of scenarios whose most probable device is the label.

    ``model`` is a :class:`Checkpoint`, a checkpoint path, or anything with a
    ``predict_proba`` returning one probability vector per scenario.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    if isinstance(model, (Checkpoint, str, Path)):
        model = DeviceArbitrationClassifier.from_checkpoint(model)
    probs = model.predict_proba(test.features)
    hits = sum(int(np.argmax(p)) == int(y) for p, y in zip(probs, test.labels))
    return hits / len(test)


@dataclass
class Cell:
    setup: str
    subset_size: int
    seed: int
    accuracy: float
    checkpoint_path: str
    relative_error_rate: float = float("nan")
    history: list = field(default_factory=list)


@dataclass
class Report:
    cells: list[Cell]

    def baseline_accuracy(self, seed: int) -> float:
        smallest = min(c.subset_size for c in self.cells)
        for c in self.cells:
            if c.setup == "baseline" and c.subset_size == smallest and c.seed == seed:
                return c.accuracy
        raise KeyError(f"no baseline cell at subset size {smallest} for seed {seed}")

    def compute_relative_errors(self) -> None:
        """Relative error of every cell against the same-seed baseline on the smallest subset.

        A perfect reference baseline leaves nothing to normalize by; the
        affected cells get NaN.
        """
        for c in self.cells:
            try:
                c.relative_error_rate = relative_error_rate(c.accuracy, self.baseline_accuracy(c.seed))
            except ZeroDivisionError:
                log.warning("seed %d: reference baseline is perfect, relative error undefined", c.seed)
                c.relative_error_rate = float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for c in sorted(self.cells, key=lambda c: (SETUPS.index(c.setup), -c.subset_size, c.seed)):
            writer.writerow([c.setup, c.subset_size, c.seed, f"{c.accuracy:.6f}", f"{c.relative_error_rate:.6f}", c.checkpoint_path])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Report":
        rows = csv.DictReader(io.StringIO(text))
        return cls([
            Cell(r["setup"], int(r["subset_size"]), int(r["seed"]), float(r["accuracy"]), r["checkpoint_path"], float(r["relative_error_rate"]))
            for r in rows
        ])

    def mean_relative_error(self, setup: str, subset_size: int) -> float:
        vals = [c.relative_error_rate for c in self.cells if c.setup == setup and c.subset_size == subset_size]
        return float(np.mean(vals))


def plot_report(report: Report, path: str | Path) -> None:
    """Relative error rate against training-set size, one line per setup (SVG)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "report", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for setup in SETUPS:
            cells = [c for c in report.cells if c.setup == setup]
            if not cells:
                continue
            sizes = sorted({c.subset_size for c in cells})
            means = [report.mean_relative_error(setup, s) for s in sizes]
            ax.plot(sizes, means, marker="o", label=setup)
        ax.set_xscale("log")
        ax.set_xlabel("labeled training scenarios")
        ax.set_ylabel("relative error rate")
        ax.set_title("Relative error rate vs. smallest-subset baseline")
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def write_report(report: Report, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    csv_path.write_text(report.to_csv())
    svg_path = out_dir / "report.svg"
    plot_report(report, svg_path)
    return csv_path, svg_path


def checkpoint_name(setup: str, size: int, seed: int) -> str:
    return f"checkpoints/finetune_{setup}_n{size}_seed{seed}.npz"


def pretrain_name(setup: str, seed: int) -> str:
    return f"checkpoints/pretrain_{setup}_seed{seed}.npz"


def result_name(setup: str, size: int, seed: int) -> str:
    return f"results/{setup}_n{size}_seed{seed}.json"


def features_name(split: str) -> str:
    return f"features/{split}.npz"


def ensure_pretrained(setup: str, train: Dataset, config: ExperimentConfig, seed: int, reuse: bool = False) -> Checkpoint | None:
    """Pretrained encoder for ``setup`` (``None`` for the baseline), saved under ``out_dir``."""
    if setup == "baseline":
        return None
    path = Path(config.out_dir) / pretrain_name(setup, seed)
    if reuse and path.exists():
        return Checkpoint.load(path)
    ckpt = pretrain(setup, train.unlabeled(), config, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    return ckpt


def ensure_finetuned(setup: str, size: int, train: Dataset, config: ExperimentConfig, seed: int, init: Checkpoint | None, reuse: bool = False) -> Checkpoint:
    path = Path(config.out_dir) / checkpoint_name(setup, size, seed)
    if reuse and path.exists():
        return Checkpoint.load(path)
    subset = nested_subsets(len(train), [size], seed)[size]
    ckpt = finetune(init, train.subset(subset), config, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(path)
    return ckpt


def ensure_evaluated(setup: str, size: int, ckpt: Checkpoint, test: Dataset, config: ExperimentConfig, seed: int, reuse: bool = False) -> Cell:
    """Accuracy of one cell, cached as a small JSON record."""
    path = Path(config.out_dir) / result_name(setup, size, seed)
    if reuse and path.exists():
        rec = json.loads(path.read_text())
        return Cell(setup, size, seed, rec["accuracy"], rec["checkpoint_path"], history=rec.get("history", []))
    acc = evaluate(ckpt, test)
    cell = Cell(setup, size, seed, acc, checkpoint_name(setup, size, seed), history=ckpt.extra.get("history", []))
    path.parent.mkdir(parents=True, exist_ok=True)
    rec = {"setup": setup, "subset_size": size, "seed": seed, "accuracy": acc, "checkpoint_path": cell.checkpoint_path, "history": cell.history}
    path.write_text(json.dumps(rec, sort_keys=True) + "\n")
    return cell


def load_or_generate(config: ExperimentConfig, split: str, reuse: bool = True) -> Dataset:
    """Features of the ``train`` or ``test`` split from ``out_dir``, generated if absent."""
    path = Path(config.out_dir) / features_name(split)
    if reuse and path.exists():
        return Dataset.load(path)
    count, stream = (config.total_scenarios, TRAIN_STREAM) if split == "train" else (config.test_scenarios, TEST_STREAM)
    data = generate_dataset(config.sampling_config, config.data_seed, count, stream, config.duration)
    path.parent.mkdir(parents=True, exist_ok=True)
    data.save(path)
    return data


def run_sweep(config: ExperimentConfig, train: Dataset | None = None, test: Dataset | None = None, reuse: bool = False) -> Report:
    """Every (setup, subset, seed) cell, relative errors, and the CSV/SVG report files.

    With ``reuse`` any checkpoint or result already present in ``out_dir`` is
    taken as is, so an interrupted sweep resumes where it stopped.
    """
    if train is None:
        train = load_or_generate(config, "train", reuse)
    if test is None:
        test = load_or_generate(config, "test", reuse)
    sizes = subset_sizes(len(train), config.subset_exponents)
    cells = []
    for seed in config.seeds:
        for setup in config.setups:
            init, ready = None, False
            for size in sizes:
                result = Path(config.out_dir) / result_name(setup, size, seed)
                if reuse and result.exists():
                    cells.append(ensure_evaluated(setup, size, None, test, config, seed, reuse=True))
                    continue
                if not ready:
                    init, ready = ensure_pretrained(setup, train, config, seed, reuse), True
                ckpt = ensure_finetuned(setup, size, train, config, seed, init, reuse)
                cell = ensure_evaluated(setup, size, ckpt, test, config, seed, reuse)
                log.info("%s n=%d seed=%d accuracy=%.4f", setup, size, seed, cell.accuracy)
                cells.append(cell)
    report = Report(cells)
    report.compute_relative_errors()
    write_report(report, config.out_dir)
    return report
