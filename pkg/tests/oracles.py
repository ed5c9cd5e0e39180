"""Independent reference computations used as test oracles.

Each one is written the slow, obvious way and shares no code with the
package path it checks.
"""
import itertools
import math

import numpy as np


def truncated_poisson_mean(mean, low, high):
    lam = mean - low
    probs = [math.exp(-lam) * lam**k / math.factorial(k) for k in range(high - low + 1)]
    z = sum(probs)
    return low + sum(k * p for k, p in enumerate(probs)) / z


def brute_force_label(devices, speaker):
    best, best_d = None, None
    for i, d in enumerate(devices):
        dist = math.sqrt(sum((a - b) ** 2 for a, b in zip(d, speaker)))
        if best_d is None or dist < best_d:
            best, best_d = i, dist
    return best


def brute_force_images(room, source, max_order):
    """Mirror images via explicit per-axis reflection sequences."""
    found = set()
    for counts in itertools.product(range(max_order + 1), repeat=3):
        if sum(counts) > max_order:
            continue
        per_axis = []
        for a in range(3):
            L, x, k = room[a], source[a], counts[a]
            # k reflections starting at either wall
            options = set()
            for first in (0, 1):
                pos = x
                wall = first
                for _ in range(k):
                    pos = -pos if wall == 0 else 2 * L - pos
                    wall = 1 - wall
                options.add(round(pos, 9))
            per_axis.append(options)
        for p in itertools.product(*per_axis):
            found.add((p, sum(counts)))
    return found


def schroeder_t60(taps, fs):
    """Backward-integrated decay, straight-line fit on -5..-25 dB, extrapolated to 60 dB."""
    energy = np.cumsum(np.asarray(taps, dtype=float)[::-1] ** 2)[::-1]
    edc = 10 * np.log10(energy / energy[0] + 1e-300)
    i5 = int(np.argmax(edc <= -5))
    i25 = int(np.argmax(edc <= -25))
    t = np.arange(len(taps)) / fs
    slope = np.polyfit(t[i5 : i25 + 1], edc[i5 : i25 + 1], 1)[0]
    return -60.0 / slope


def direct_convolution(x, h):
    out = np.zeros(len(x) + len(h) - 1)
    for i, hv in enumerate(h):
        if hv != 0.0:
            out[i : i + len(x)] += hv * x
    return out


def naive_contrastive(za, zb):
    n = len(za)
    l1 = 0.0
    for i in range(n):
        for j in range(n):
            dot = sum(a * b for a, b in zip(za[i], zb[j]))
            l1 += abs(dot - (1.0 if i == j else 0.0))
    l2 = 0.0
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            l2 += abs(sum(a * b for a, b in zip(za[i], za[j])))
            l2 += abs(sum(a * b for a, b in zip(zb[i], zb[j])))
    return l1 + l2


def band_energy_fraction(x, fs, lo, hi):
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / fs)
    return spec[(f >= lo) & (f <= hi)].sum() / spec.sum()


def central_difference_check(fn, tensors, step=1e-5, n_probe=6, rng=None):
    """Worst relative error between autograd and central differences.

    ``fn()`` returns a scalar tensor computed from ``tensors`` (double
    precision, requires_grad). For each tensor ``n_probe`` random coordinates
    are perturbed; the error is ``|numeric - analytic| / max(|numeric|, |analytic|)``
    measured as vectors over the probed coordinates.
    """
    import torch

    rng = rng or np.random.default_rng(0)
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            g = torch.zeros_like(t) if g is None else g
            numeric, analytic = [], []
            for flat in rng.choice(t.numel(), size=min(n_probe, t.numel()), replace=False):
                idx = np.unravel_index(int(flat), tuple(t.shape))
                orig = t[idx].item()
                t[idx] = orig + step
                up = fn().item()
                t[idx] = orig - step
                down = fn().item()
                t[idx] = orig
                numeric.append((up - down) / (2 * step))
                analytic.append(g[idx].item())
            numeric, analytic = np.array(numeric), np.array(analytic)
            scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
            worst = max(worst, float(np.linalg.norm(numeric - analytic) / scale))
    return worst
