import math

import numpy as np
import pytest
import torch

from acoustic_arbitration.nn import EncoderConfig, PretrainModel
from acoustic_arbitration.objectives import (
    ObjectiveWeights,
    SplitSpec,
    combo_loss,
    contrastive_loss,
    cross_entropy,
    draw_partners,
    make_split,
    reconstructive_loss,
    relative_error_rate,
)
from oracles import naive_contrastive

TINY = EncoderConfig(conv_layers=6, channels=8, embedding_dim=8, n_heads=2, transformer_layers=1, ff_dim=16)


def unit_rows(rng, n, d):
    z = rng.standard_normal((n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def test_contrastive_fixed_points():
    e = torch.eye(4, dtype=torch.float64)
    assert contrastive_loss(e[:1], e[:1]).item() == 0.0
    assert contrastive_loss(e[:2], e[:2]).item() == 0.0


def test_contrastive_all_identical_is_six():
    v = torch.zeros(2, 5, dtype=torch.float64)
    v[:, 0] = 1.0
    assert contrastive_loss(v, v).item() == 6.0


def test_contrastive_matches_naive_oracle(rng):
    for _ in range(100):
        n, d = int(rng.integers(1, 8)), int(rng.integers(2, 17))
        za, zb = unit_rows(rng, n, d), unit_rows(rng, n, d)
        got = contrastive_loss(torch.from_numpy(za), torch.from_numpy(zb)).item()
        assert abs(got - naive_contrastive(za.tolist(), zb.tolist())) < 1e-6


def test_contrastive_bounds_and_symmetry(rng):
    for _ in range(50):
        n = int(rng.integers(1, 9))
        za, zb = unit_rows(rng, n, 6), unit_rows(rng, n, 6)
        value = contrastive_loss(torch.from_numpy(za), torch.from_numpy(zb)).item()
        assert 0 <= value <= 2 * n * n + 2 * n * (n - 1)
        perm = rng.permutation(n)
        permuted = contrastive_loss(torch.from_numpy(za[perm]), torch.from_numpy(zb[perm])).item()
        assert permuted == pytest.approx(value, abs=1e-12)


def test_contrastive_rejects_non_unit(rng):
    z = torch.from_numpy(unit_rows(rng, 3, 4)) * 1.01
    with pytest.raises(ValueError):
        contrastive_loss(z, z)
    with pytest.raises(ValueError):
        contrastive_loss(torch.zeros(0, 4), torch.zeros(0, 4))


def test_make_split_examples(rng):
    assert make_split(32000, rng, epsilon=0.0).t_split == 16000
    for _ in range(10**4):
        s = make_split(32000, rng, epsilon=0.05)
        assert 0.45 * 32000 < s.t_split < 0.55 * 32000
    x = rng.standard_normal((3, 32000))
    a, b = s.slices(x)
    assert np.array_equal(np.concatenate([a, b], axis=-1), x)
    with pytest.raises(ValueError):
        make_split(799, rng)


def test_make_split_alignment(rng):
    for _ in range(200):
        assert make_split(32000, rng, align=160).t_split % 160 == 0


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec(100, 0)
    with pytest.raises(ValueError):
        SplitSpec(100, 80, 0.05)


def test_draw_partners_never_self(rng):
    for n in range(2, 7):
        p = draw_partners(n, rng)
        assert np.all(p != np.arange(n)) and np.all((0 <= p) & (p < n))
    with pytest.raises(ValueError):
        draw_partners(1, rng)


def _reconstruction_oracle(model, feats, partners):
    """Straight-line recomputation, one recording at a time."""
    total = 0.0
    n = feats.shape[0]
    for i in range(n):
        j = int(partners[i])
        speech = model.speech_encoder(feats[j : j + 1])
        z = model.embed(feats[i : i + 1])
        env = feats[i : i + 1].sum(dim=-1) / feats.shape[-1]
        recon = model.decoder(speech, z, env)[0]
        diff = recon - feats[i]
        total += float((diff * diff).sum().detach()) / diff.numel()
    return total / n


def test_reconstructive_loss_matches_oracle():
    torch.manual_seed(0)
    model = PretrainModel(TINY).double().eval()
    feats = torch.randn(3, 24, 64, dtype=torch.float64)
    got = reconstructive_loss(feats, model, np.random.default_rng(7)).item()
    partners = draw_partners(3, np.random.default_rng(7))
    assert abs(got - _reconstruction_oracle(model, feats, partners)) < 1e-6
    assert got >= 0


def test_reconstructive_loss_perfect_decoder_is_zero():
    class Echo(torch.nn.Module):
        def forward(self, speech, z, env):
            return self.target

    model = PretrainModel(TINY).double().eval()
    feats = torch.randn(2, 16, 64, dtype=torch.float64)
    model.decoder = Echo()
    model.decoder.target = feats
    assert reconstructive_loss(feats, model, np.random.default_rng(0)).item() == 0.0


def test_reconstructive_loss_permutation_invariance():
    torch.manual_seed(1)
    model = PretrainModel(TINY).double().eval()
    feats = torch.randn(4, 16, 64, dtype=torch.float64)
    partners = np.array([2, 0, 3, 1])
    base = reconstructive_loss(feats, model, None, partners).item()
    perm = np.array([3, 1, 0, 2])
    inv = np.argsort(perm)
    permuted = reconstructive_loss(feats[perm], model, None, inv[partners[perm]]).item()
    assert permuted == pytest.approx(base, abs=1e-10)


def test_combo_loss():
    assert combo_loss(2.0, 4.0, ObjectiveWeights(0.5)) == 3.0
    assert combo_loss(2.0, 4.0, ObjectiveWeights(1.0)) == 2.0
    assert combo_loss(2.0, 4.0, ObjectiveWeights(0.0)) == 4.0
    with pytest.raises(ValueError):
        ObjectiveWeights(1.5)


def test_cross_entropy():
    assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(math.log(4))
    assert cross_entropy([0.25] * 4, 2) == pytest.approx(1.3863, abs=1e-4)
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))
    assert cross_entropy(torch.tensor([0.5, 0.5]), 0).item() == pytest.approx(math.log(2))
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


def test_relative_error_rate():
    assert relative_error_rate(0.8, 0.8) == 1.0
    assert relative_error_rate(1.0, 0.8) == 0.0
    assert relative_error_rate(0.9, 0.8) == (1 - 0.9) / (1 - 0.8)
    assert relative_error_rate(0.9, 0.8) == pytest.approx(0.5)
    with pytest.raises(ZeroDivisionError):
        relative_error_rate(0.9, 1.0)
    with pytest.raises(ValueError):
        relative_error_rate(1.2, 0.5)
