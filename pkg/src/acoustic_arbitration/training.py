"""Optimization loop with best-validation checkpoint selection."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainResult:
    best_state: dict
    best_step: int
    best_val_loss: float
    initial_val_loss: float
    history: list[dict] = field(default_factory=list)


def train_validation_split(n: int, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split; a single item serves as both train and validation."""
    if not 0.0 < fraction <= 0.5:
        raise ValueError("validation fraction must lie in (0, 0.5]")
    order = rng.permutation(n)
    if n < 2:
        return order, order
    n_val = min(max(1, int(round(fraction * n))), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _check_finite(value, step, what):
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{what} is {value} at step {step}; lower the learning rate or check the inputs")


def run_training(
    model: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module, int, np.random.Generator], torch.Tensor],
    train_idx: Sequence[int],
    val_idx: Sequence[int],
    n_steps: int,
    batch_size: int,
    learning_rate: float,
    eval_interval: int,
    seed: int,
    verbose: bool = False,
) -> TrainResult:
    """Adam with cosine decay; keeps the parameters with lowest validation loss.

    ``loss_fn(model, index, rng)`` returns the loss of one scenario. A step
    averages it over ``batch_size`` scenarios (gradient accumulation over
    scenarios of different device counts). Validation is evaluated at step 0,
    every ``eval_interval`` steps and at the end, with a fixed generator so
    repeated evaluations see the same random splits and partners.
    """
    rng = np.random.default_rng([seed, 2])
    train_idx = np.asarray(train_idx)

    def validate():
        model.eval()
        vrng = np.random.default_rng([seed, 3])
        with torch.no_grad():
            losses = [float(loss_fn(model, int(i), vrng)) for i in val_idx]
        model.train()
        return float(np.mean(losses))

    best_val = validate()
    _check_finite(best_val, 0, "validation loss")
    result = TrainResult(copy.deepcopy(model.state_dict()), 0, best_val, best_val, [{"step": 0, "val_loss": best_val}])
    if n_steps <= 0:
        return result

    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, n_steps) / n_steps)))
    order = rng.permutation(train_idx)
    cursor = 0
    model.train()
    running = []
    for step in range(1, n_steps + 1):
        batch = []
        while len(batch) < min(batch_size, len(train_idx)):
            if cursor == len(order):
                order, cursor = rng.permutation(train_idx), 0
            batch.append(int(order[cursor]))
            cursor += 1
        opt.zero_grad()
        total = 0.0
        for i in batch:
            loss = loss_fn(model, i, rng) / len(batch)
            loss.backward()
            total += float(loss.detach())
        _check_finite(total, step, "training loss")
        opt.step()
        sched.step()
        running.append(total)
        if step % eval_interval == 0 or step == n_steps:
            val = validate()
            _check_finite(val, step, "validation loss")
            result.history.append({"step": step, "train_loss": float(np.mean(running)), "val_loss": val})
            running = []
            if verbose:
                log.info("step %d train %.4f val %.4f", step, result.history[-1]["train_loss"], val)
            if val < result.best_val_loss:
                result.best_val_loss = val
                result.best_step = step
                result.best_state = copy.deepcopy(model.state_dict())
    return result
