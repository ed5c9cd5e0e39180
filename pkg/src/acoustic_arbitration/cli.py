"""Command line entry point.

All artifacts of one experiment live under ``--out``::

    scenes/{train,test}.jsonl      gen-scenes
    audio/{train,test}/            gen-audio (WAV files + manifest.jsonl)
    features/{train,test}.npz      featurize
    checkpoints/*.npz              pretrain, finetune
    results/*.json                 evaluate
    report.csv, report.svg         report

On failure a single JSON line ``{"error": ..., "message": ...}`` goes to
stderr and the exit code is nonzero (2 for usage errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import Dataset, ExperimentConfig
from .scenes import read_manifest, sample_scenes, write_manifest
from .synth import iter_dataset, simulate_scenario, write_dataset

SPLITS = ("train", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if args.out:
        config.out_dir = str(args.out)
    return config


def _split_count(config: ExperimentConfig, split: str) -> tuple[int, int]:
    if split == "train":
        return config.total_scenarios, harness.TRAIN_STREAM
    return config.test_scenarios, harness.TEST_STREAM


def cmd_gen_scenes(args, config):
    seed = config.data_seed if args.seed is None else args.seed
    out = Path(config.out_dir) / "scenes"
    out.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        count, stream = _split_count(config, split)
        write_manifest(out / f"{split}.jsonl", sample_scenes(config.sampling_config, seed, count, stream))
    return {"scenes": str(out)}


def cmd_gen_audio(args, config):
    root = Path(config.out_dir)
    for split in SPLITS:
        scenes = read_manifest(root / "scenes" / f"{split}.jsonl")
        scenarios = (simulate_scenario(s, config.duration) for s in scenes)
        write_dataset(root / "audio" / split, scenarios, layout=args.layout)
    return {"audio": str(root / "audio")}


def cmd_featurize(args, config):
    root = Path(config.out_dir)
    for split in SPLITS:
        feats, labels, scenes = [], [], []
        for scenario in iter_dataset(root / "audio" / split):
            feats.append(harness.scenario_features(scenario))
            labels.append(scenario.label)
            scenes.append(scenario.scene)
        path = root / harness.features_name(split)
        path.parent.mkdir(parents=True, exist_ok=True)
        Dataset(feats, np.array(labels, dtype=np.int64), scenes).save(path)
    return {"features": str(root / "features")}


def _load(config, split):
    path = Path(config.out_dir) / harness.features_name(split)
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run featurize first")
    return Dataset.load(path)


def _seed(args, config):
    return config.seeds[0] if args.seed is None else args.seed


def _size(args, config, train_len):
    exponent = args.subset_exp if args.subset_exp is not None else max(config.subset_exponents)
    return harness.subset_sizes(train_len, [exponent])[0]


def _setup(args, allowed):
    if args.setup is None:
        raise UsageError("--setup is required")
    if args.setup not in allowed:
        raise UsageError(f"--setup must be one of {list(allowed)}")
    return args.setup


def _init_checkpoint(setup, config, seed):
    if setup == "baseline":
        return None
    path = Path(config.out_dir) / harness.pretrain_name(setup, seed)
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run pretrain --setup {setup} --seed {seed} first")
    return harness.Checkpoint.load(path)


def cmd_pretrain(args, config):
    setup = _setup(args, harness.OBJECTIVES)
    seed = _seed(args, config)
    harness.ensure_pretrained(setup, _load(config, "train"), config, seed)
    return {"checkpoint": str(Path(config.out_dir) / harness.pretrain_name(setup, seed))}


def cmd_finetune(args, config):
    setup = _setup(args, harness.SETUPS)
    seed = _seed(args, config)
    train = _load(config, "train")
    size = _size(args, config, len(train))
    ckpt = harness.ensure_finetuned(setup, size, train, config, seed, _init_checkpoint(setup, config, seed))
    return {"checkpoint": str(Path(config.out_dir) / harness.checkpoint_name(setup, size, seed)), "best_step": ckpt.step}


def cmd_evaluate(args, config):
    setup = _setup(args, harness.SETUPS)
    seed = _seed(args, config)
    size = _size(args, config, config.total_scenarios)
    path = Path(config.out_dir) / harness.checkpoint_name(setup, size, seed)
    if not path.exists():
        raise FileNotFoundError(f"{path} is missing; run finetune first")
    cell = harness.ensure_evaluated(setup, size, harness.Checkpoint.load(path), _load(config, "test"), config, seed)
    return {"setup": setup, "subset_size": size, "seed": seed, "accuracy": cell.accuracy}


def cmd_report(args, config):
    if args.seed is not None:
        config.seeds = (args.seed,)
    if args.setup is not None:
        config.setups = ("baseline", _setup(args, harness.OBJECTIVES)) if args.setup != "baseline" else ("baseline",)
    if args.subset_exp is not None:
        config.subset_exponents = tuple(sorted({0, args.subset_exp}))
    report = harness.run_sweep(config, reuse=True)
    return {"report": str(Path(config.out_dir) / "report.csv"), "cells": len(report.cells)}


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "sample scene specifications (JSONL)"),
    "gen-audio": (cmd_gen_audio, "render multi-device audio for the sampled scenes"),
    "featurize": (cmd_featurize, "compute normalized LFBE features from rendered audio"),
    "pretrain": (cmd_pretrain, "self-supervised pretraining of the acoustic encoder"),
    "finetune": (cmd_finetune, "train the arbitration classifier on a labeled subset"),
    "evaluate": (cmd_evaluate, "accuracy of a finetuned checkpoint on the test split"),
    "report": (cmd_report, "run (or resume) the sweep and write report.csv/report.svg"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arbitration", description="Multi-device arbitration experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="data seed (gen-scenes) or training seed")
        p.add_argument("--out", type=Path, help="artifact directory (overrides out_dir)")
        p.add_argument("--setup", help=f"one of {list(harness.SETUPS)}")
        p.add_argument("--subset-exp", type=int, help="labeled subset size is floor(total / 4**EXP)")
        if name == "gen-audio":
            p.add_argument("--layout", choices=("per_device", "multichannel"), default="per_device")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        config = _config(args)
        result = COMMANDS[args.command][0](args, config)
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one error line
        _emit_error(type(exc).__name__, str(exc))
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
