"""Training objectives and the relative error metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .features import FRAME_SIZE

UNIT_NORM_TOLERANCE = 1e-3
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class SplitSpec:
    T: int
    t_split: int
    epsilon: float = 0.05

    def __post_init__(self):
        if not 0 < self.t_split < self.T:
            raise ValueError(f"t_split={self.t_split} must lie strictly inside (0, {self.T})")
        if self.epsilon > 0:
            lo, hi = self.T / 2 - self.epsilon * self.T, self.T / 2 + self.epsilon * self.T
            if not lo < self.t_split < hi:
                raise ValueError(f"t_split={self.t_split} outside jitter window ({lo}, {hi})")

    def slices(self, x):
        """First and second part of ``x`` along its last axis."""
        return x[..., : self.t_split], x[..., self.t_split :]


@dataclass(frozen=True)
class ObjectiveWeights:
    lam: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def make_split(T: int, rng: np.random.Generator, epsilon: float = 0.05, align: int = 1, min_length: int = 2 * FRAME_SIZE) -> SplitSpec:
    """Draw a split index uniformly from ``(T/2 - eps T, T/2 + eps T)``.

    With ``align > 1`` only multiples of ``align`` are eligible (falling back
    to the multiple nearest the center when none fits). One split is shared
    by all recordings of a scenario.
    """
    if T < min_length:
        raise ValueError(f"T={T} is shorter than the minimum {min_length}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    center = T // 2
    if epsilon == 0:
        return SplitSpec(T, center, 0.0)
    lo = int(np.floor(T / 2 - epsilon * T)) + 1
    hi = int(np.ceil(T / 2 + epsilon * T)) - 1
    lo = -(-lo // align) * align
    hi = hi // align * align
    if hi < lo:
        return SplitSpec(T, max(align, round(center / align) * align), 0.0)
    choices = (hi - lo) // align + 1
    return SplitSpec(T, lo + align * int(rng.integers(choices)), epsilon)


def _check_unit(z, name):
    norms = torch.linalg.vector_norm(z.detach(), dim=-1)
    if torch.any(torch.abs(norms - 1) > UNIT_NORM_TOLERANCE):
        raise ValueError(f"{name} must contain unit vectors (max norm deviation {float((norms - 1).abs().max()):.2e})")


def contrastive_loss(z_first: torch.Tensor, z_second: torch.Tensor) -> torch.Tensor:
    """Pull the two halves of each recording together, push recordings apart.

    ``z_first[i]`` and ``z_second[i]`` embed the first and second part of
    recording ``i``; both are ``(N, D)`` with unit rows. Returns
    ``sum_ij |<a_i, b_j> - [i == j]| + sum_{i != j} |<a_i, a_j>| + |<b_i, b_j>|``.
    """
    z_first = torch.as_tensor(z_first)
    z_second = torch.as_tensor(z_second)
    if z_first.ndim != 2 or z_first.shape != z_second.shape or z_first.shape[0] < 1:
        raise ValueError(f"expected two (N, D) arrays of equal shape, got {tuple(z_first.shape)} and {tuple(z_second.shape)}")
    _check_unit(z_first, "z_first")
    _check_unit(z_second, "z_second")
    n = z_first.shape[0]
    eye = torch.eye(n, dtype=z_first.dtype, device=z_first.device)
    cross = (z_first @ z_second.T - eye).abs().sum()
    off = 1.0 - eye
    within = ((z_first @ z_first.T).abs() * off).sum() + ((z_second @ z_second.T).abs() * off).sum()
    return cross + within


def draw_partners(n: int, rng: np.random.Generator) -> np.ndarray:
    """For each recording ``i`` a uniformly chosen other recording."""
    if n < 2:
        raise ValueError("reconstruction needs at least two recordings")
    j = rng.integers(0, n - 1, size=n)
    return j + (j >= np.arange(n))


def reconstructive_loss(features: torch.Tensor, model, rng: np.random.Generator, partners: np.ndarray | None = None) -> torch.Tensor:
    """Mean squared error of rebuilding each recording from a partner's speech code.

    ``features`` is ``(N, frames, 64)`` normalized LFBE of one scenario;
    ``model`` provides ``embed`` (acoustic encoder), ``speech_encoder`` and
    ``decoder``. Recording ``i`` is reconstructed from the speech sequence of
    its partner, its own acoustic embedding and its own envelope. The error
    is averaged over frames and bins, then over recordings.
    """
    n = features.shape[0]
    if partners is None:
        partners = draw_partners(n, rng)
    speech = model.speech_encoder(features)
    z = model.embed(features)
    env = features.mean(dim=-1)
    recon = model.decoder(speech[torch.as_tensor(partners)], z, env)
    return ((recon - features) ** 2).mean()


def combo_loss(recon_loss, contrast_loss, weights: ObjectiveWeights = ObjectiveWeights()):
    return weights.lam * recon_loss + (1.0 - weights.lam) * contrast_loss


def cross_entropy(probs, label: int):
    """``-log(max(probs[label], 1e-12))`` for a torch tensor or array-like."""
    n = len(probs)
    if not 0 <= label < n:
        raise IndexError(f"label {label} out of range for {n} devices")
    if isinstance(probs, torch.Tensor):
        return -torch.log(torch.clamp_min(probs[label], PROB_FLOOR))
    return float(-np.log(max(float(probs[label]), PROB_FLOOR)))


def relative_error_rate(acc_method: float, acc_base: float) -> float:
    """``(1 - acc_method) / (1 - acc_base)``."""
    for name, v in (("acc_method", acc_method), ("acc_base", acc_base)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {v}")
    if acc_base == 1.0:
        raise ZeroDivisionError("baseline accuracy of 1 leaves no error to normalize by")
    return (1.0 - acc_method) / (1.0 - acc_base)
