import numpy as np
import pytest
import torch

from acoustic_arbitration.estimators import contrastive_scenario_loss
from acoustic_arbitration.nn import (
    ArbitrationHead,
    ArbitrationModel,
    Checkpoint,
    ConvEncoder,
    EncoderConfig,
    PopulationBatchNorm,
    PretrainModel,
    ReconstructionDecoder,
    SpeechEncoder,
    Summarizer,
)
from acoustic_arbitration.objectives import contrastive_loss, reconstructive_loss
from oracles import central_difference_check

# D = 8, total stride 8 so 24 frames give K = 3
MINI = EncoderConfig(conv_layers=6, channels=8, embedding_dim=8, n_heads=2, transformer_layers=1, ff_dim=16)
TOL = 1e-3


def _double(module):
    torch.manual_seed(0)
    return module.double().eval()


def _leaf(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, dtype=torch.float64, generator=g).requires_grad_(True)


def _check(fn, module, inputs):
    params = [p for p in module.parameters() if p.requires_grad]
    return central_difference_check(fn, [*inputs, *params], step=1e-5, n_probe=6)


def test_shapes():
    model = ArbitrationModel(MINI)
    feats = torch.randn(3, 198, 64)
    h = model.encoder(feats)
    assert h.shape == (3, 25, 8) and model.encoder.output_length(198) == 25
    assert model(feats).shape == (3,)
    assert torch.allclose(model.predict_proba(feats).sum(), torch.tensor(1.0))
    pre = PretrainModel(MINI)
    assert pre.embed(feats).shape == (3, 8)
    assert pre.speech_encoder(feats).shape == (3, 198, 8)


def test_summarizer_unit_norm():
    z = PretrainModel(MINI).embed(torch.randn(5, 40, 64) * 10)
    assert torch.allclose(torch.linalg.vector_norm(z, dim=-1), torch.ones(5), atol=1e-6)


def test_encoder_rejects_short_input():
    with pytest.raises(ValueError):
        ConvEncoder(MINI)(torch.randn(1, 4, 64))


def test_head_permutation_equivariant_without_positions():
    head = _double(ArbitrationHead(MINI, positional=False))
    hidden = torch.randn(4, 3, 8, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(head(hidden)[perm], head(hidden[perm]), atol=1e-10)


def test_head_accepts_variable_device_count():
    head = ArbitrationHead(MINI)
    for n in (1, 2, 5):
        assert head(torch.randn(n, 3, 8)).shape == (n,)


def test_encoder_gradients():
    enc = _double(ConvEncoder(MINI))
    x = _leaf(2, 24, 64)
    assert _check(lambda: (enc(x) ** 2).sum(), enc, [x]) <= TOL


def test_summarizer_gradients():
    summ = _double(Summarizer(MINI))
    h = _leaf(2, 3, 8)
    w = torch.randn(2, 8, dtype=torch.float64)
    assert _check(lambda: (summ(h) * w).sum(), summ, [h]) <= TOL


def test_speech_encoder_gradients():
    s = _double(SpeechEncoder(MINI))
    x = _leaf(2, 4, 64)
    assert _check(lambda: (s(x) ** 2).sum(), s, [x]) <= TOL


def test_decoder_gradients():
    dec = _double(ReconstructionDecoder(MINI))
    speech, z, env = _leaf(2, 4, 8, seed=1), _leaf(2, 8, seed=2), _leaf(2, 4, seed=3)
    assert _check(lambda: (dec(speech, z, env) ** 2).mean(), dec, [speech, z, env]) <= TOL


def test_classifier_gradients():
    model = _double(ArbitrationModel(MINI))
    x = _leaf(3, 24, 64)
    assert _check(lambda: torch.log_softmax(model(x), 0)[1].neg(), model, [x]) <= TOL


def test_contrastive_loss_gradients():
    rng = np.random.default_rng(3)
    while True:
        a = torch.nn.functional.normalize(_leaf(3, 8, seed=int(rng.integers(1 << 30))), dim=-1)
        b = torch.nn.functional.normalize(_leaf(3, 8, seed=int(rng.integers(1 << 30))), dim=-1)
        gram = torch.cat([(a @ b.T - torch.eye(3)).flatten(), (a @ a.T).flatten(), (b @ b.T).flatten()])
        if torch.all(gram.abs()[gram.abs() > 1e-12] > 1e-4):
            break
    a = a.detach().requires_grad_(True)
    b = b.detach().requires_grad_(True)

    def fn():
        # renormalize so finite-difference probes stay on the unit sphere
        return contrastive_loss(torch.nn.functional.normalize(a, dim=-1), torch.nn.functional.normalize(b, dim=-1))

    assert central_difference_check(fn, [a, b], step=1e-5, n_probe=8) <= TOL


def test_reconstructive_loss_gradients():
    model = _double(PretrainModel(MINI))
    x = _leaf(3, 24, 64)
    partners = np.array([1, 2, 0])
    assert _check(lambda: reconstructive_loss(x, model, None, partners), model, [x]) <= TOL


def test_contrastive_scenario_loss_runs():
    model = PretrainModel(MINI)
    loss = contrastive_scenario_loss(model, torch.randn(3, 198, 64), np.random.default_rng(0))
    assert torch.isfinite(loss) and loss.item() >= 0
    loss.backward()


def test_checkpoint_round_trip(tmp_path):
    model = ArbitrationModel(MINI)
    ckpt = Checkpoint.from_module("classifier", model, {"encoder": MINI.to_dict()}, validation_loss=0.5, step=7)
    path = tmp_path / "m.ckpt"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.kind == "classifier" and back.step == 7 and back.validation_loss == 0.5
    assert EncoderConfig.from_dict(back.config["encoder"]) == MINI
    fresh = ArbitrationModel(MINI)
    back.load_into(fresh)
    x = torch.randn(2, 24, 64)
    assert torch.equal(model.eval()(x), fresh.eval()(x))
    assert all(v.dtype == np.float32 for v in back.state.values() if v.dtype.kind == "f")


def test_checkpoint_rejects_unknown_version(tmp_path):
    import json

    path = tmp_path / "bad.ckpt"
    meta = json.dumps({"format_version": 99, "names": []}).encode()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(meta, dtype=np.uint8))
    with pytest.raises(ValueError):
        Checkpoint.load(path)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embedding_dim=10, n_heads=3)
    assert EncoderConfig.large().conv_layers == 18


def test_batch_norm_output_independent_of_batch_mates():
    bn = PopulationBatchNorm(8).train()
    bn.running_mean.fill_(0.3)
    x = torch.randn(4, 8, 10)
    alone = bn(x[:1].clone())
    bn.running_mean.fill_(0.3)
    bn.running_var.fill_(1.0)
    together = bn(x)
    assert torch.allclose(alone, together[:1], atol=1e-6)
    assert not torch.allclose(bn.running_mean, torch.full((8,), 0.3))
