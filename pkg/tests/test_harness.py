import numpy as np
import pytest
import torch

from acoustic_arbitration.estimators import AcousticPretrainer, DeviceArbitrationClassifier
from acoustic_arbitration.harness import (
    REPORT_COLUMNS,
    Cell,
    Dataset,
    ExperimentConfig,
    Report,
    evaluate,
    generate_dataset,
    nested_subsets,
    run_sweep,
    subset_sizes,
)
from acoustic_arbitration.nn import Checkpoint
from acoustic_arbitration.scenes import SamplingConfig, ShiftedPoissonParams
from acoustic_arbitration.training import train_validation_split

MINI_MODEL = {"conv_layers": 6, "channels": 8, "embedding_dim": 8, "n_heads": 2, "transformer_layers": 1, "ff_dim": 16}


def random_data(n, rng, frames=40, devices=(2, 4)):
    feats = [rng.standard_normal((int(rng.integers(*devices, endpoint=True)), frames, 64)).astype(np.float32) for _ in range(n)]
    labels = np.array([int(rng.integers(f.shape[0])) for f in feats])
    return feats, labels


def test_subset_sizes_examples():
    assert subset_sizes(300000, [0]) == [300000]
    assert subset_sizes(300000, [4]) == [1171]
    assert subset_sizes(300000, [3]) == [4687]
    assert subset_sizes(2000, [0, 1, 2, 3]) == [2000, 500, 125, 31]
    assert subset_sizes(4, [1]) == [1]
    with pytest.raises(ValueError):
        subset_sizes(3, [1])


def test_nested_subsets_are_nested_and_seeded():
    sizes = [2000, 500, 125, 31]
    subsets = nested_subsets(2000, sizes, seed=4)
    for big, small in zip(sizes, sizes[1:]):
        assert set(subsets[small]) <= set(subsets[big])
        assert len(subsets[small]) == small
    again = nested_subsets(2000, sizes, seed=4)
    assert all(np.array_equal(subsets[s], again[s]) for s in sizes)
    assert not np.array_equal(nested_subsets(2000, [31], 5)[31], subsets[31])


def test_train_validation_split():
    rng = np.random.default_rng(0)
    tr, va = train_validation_split(31, 0.1, rng)
    assert len(va) == 3 and len(tr) == 28 and not set(tr) & set(va)
    tr, va = train_validation_split(1, 0.1, rng)
    assert list(tr) == list(va) == [0]


class _Stub:
    def __init__(self, fn):
        self.fn = fn

    def predict_proba(self, X):
        return [self.fn(x) for x in X]


def test_evaluate_with_stubs():
    rng = np.random.default_rng(1)
    feats = [np.zeros((2, 1, 1)) for _ in range(10**4)]
    labels = rng.integers(0, 2, size=10**4)
    data = Dataset(feats, labels, [None] * len(feats))
    oracle = iter(labels)
    assert evaluate(_Stub(lambda x: np.eye(2)[next(oracle)]), data) == 1.0
    acc = evaluate(_Stub(lambda x: np.eye(2)[rng.integers(2)]), data)
    assert abs(acc - 0.5) <= 0.02


def test_zero_step_finetune_keeps_initial_weights(rng):
    feats, labels = random_data(6, rng)
    pre = AcousticPretrainer(encoder_config=MINI_MODEL, n_steps=2, batch_size=2, eval_interval=1).fit(feats)
    ckpt = pre.to_checkpoint()
    clf = DeviceArbitrationClassifier(init_checkpoint=ckpt, n_steps=0).fit(feats, labels)
    for name, value in clf.model_.encoder.state_dict().items():
        assert np.array_equal(value.numpy(), ckpt.state["encoder." + name])


def test_combo_bookkeeping(rng):
    feats, _ = random_data(1, rng)
    est = AcousticPretrainer(objective="combo", lam=0.5, encoder_config=MINI_MODEL)
    est.fit(random_data(4, rng)[0] + feats)
    x = torch.from_numpy(feats[0])
    parts = []
    total = est.scenario_loss(est.model_, x, np.random.default_rng(9), parts)
    l_r, l_c = parts[0]
    assert float(total.detach()) == pytest.approx(0.5 * l_r + 0.5 * l_c, rel=1e-6)


def test_pretrainer_training_reduces_validation_loss(rng):
    feats, _ = random_data(16, rng, frames=60)
    est = AcousticPretrainer(encoder_config=MINI_MODEL, n_steps=30, batch_size=4, eval_interval=10, learning_rate=3e-3).fit(feats)
    assert est.best_validation_loss_ <= est.initial_validation_loss_
    emb = est.transform(feats[:2])
    assert emb[0].shape == (feats[0].shape[0], 8)
    assert np.allclose(np.linalg.norm(emb[0], axis=1), 1, atol=1e-5)


def test_classifier_fit_predict_and_checkpoint(tmp_path, rng):
    feats, labels = random_data(10, rng)
    clf = DeviceArbitrationClassifier(encoder_config=MINI_MODEL, n_steps=5, batch_size=2, eval_interval=2, random_state=3)
    clf.fit(feats, labels)
    probs = clf.predict_proba(feats)
    assert all(p.shape == (f.shape[0],) and abs(p.sum() - 1) < 1e-6 for p, f in zip(probs, feats))
    path = tmp_path / "clf.npz"
    clf.to_checkpoint().save(path)
    back = DeviceArbitrationClassifier.from_checkpoint(path)
    assert all(np.allclose(a, b, atol=1e-6) for a, b in zip(probs, back.predict_proba(feats)))
    assert np.array_equal(clf.predict(feats), back.predict(feats))
    assert clf.get_params()["n_steps"] == 5


def test_classifier_is_deterministic(rng):
    feats, labels = random_data(8, rng)
    kw = dict(encoder_config=MINI_MODEL, n_steps=4, batch_size=2, eval_interval=2, random_state=11)
    a = DeviceArbitrationClassifier(**kw).fit(feats, labels).to_checkpoint()
    b = DeviceArbitrationClassifier(**kw).fit(feats, labels).to_checkpoint()
    assert all(np.array_equal(a.state[k], b.state[k]) for k in a.state)


def test_classifier_rejects_bad_labels(rng):
    feats, _ = random_data(3, rng, devices=(2, 2))
    with pytest.raises(ValueError):
        DeviceArbitrationClassifier(encoder_config=MINI_MODEL, n_steps=0).fit(feats, [0, 1, 5])


def test_finetune_rejects_checkpoint_without_encoder(rng):
    feats, labels = random_data(3, rng)
    bogus = Checkpoint("pretrain:contrastive", MINI_MODEL, {"other.weight": np.zeros(3, np.float32)})
    with pytest.raises(ValueError):
        DeviceArbitrationClassifier(init_checkpoint=bogus, n_steps=0).fit(feats, labels)


def test_report_relative_errors_and_csv():
    cells = [
        Cell("baseline", 31, 0, 0.6, "a"), Cell("baseline", 125, 0, 0.8, "b"),
        Cell("contrastive", 31, 0, 0.7, "c"), Cell("contrastive", 125, 0, 0.9, "d"),
    ]
    report = Report(cells)
    report.compute_relative_errors()
    rel = {(c.setup, c.subset_size): c.relative_error_rate for c in cells}
    assert rel[("baseline", 31)] == 1.0
    assert rel[("contrastive", 31)] == pytest.approx(0.75)
    assert rel[("baseline", 125)] == pytest.approx(0.5)
    text = report.to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 5
    back = Report.from_csv(text)
    back.compute_relative_errors()
    assert back.to_csv() == text


def test_perfect_baseline_gives_nan():
    report = Report([Cell("baseline", 31, 0, 1.0, "a"), Cell("contrastive", 31, 0, 0.9, "b")])
    report.compute_relative_errors()
    assert all(np.isnan(c.relative_error_rate) for c in report.cells)
    assert "nan" in report.to_csv()


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(seeds=(1,), subset_exponents=(0, 2), pretrain={"n_steps": 3})
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.yaml"
    path.write_text("seeds: [4]\nfinetune: {n_steps: 7}\n")
    loaded = ExperimentConfig.from_file(path)
    assert loaded.seeds == (4,) and loaded.finetune.n_steps == 7
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"unknown_key": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(setups=("nonsense",))


def tiny_config(out_dir, **kw):
    base = dict(
        total_scenarios=16, test_scenarios=6, subset_exponents=(0, 1), seeds=(0,),
        setups=("baseline", "contrastive"), model=MINI_MODEL, out_dir=str(out_dir),
        pretrain={"n_steps": 2, "batch_size": 2, "eval_interval": 1},
        finetune={"n_steps": 2, "batch_size": 2, "eval_interval": 1},
        sampling={"device_count": {"mean": 3, "low": 2, "high": 3}},
        duration=0.5,
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    sampling = SamplingConfig(device_count=ShiftedPoissonParams(3, 2, 3))
    return generate_dataset(sampling, 5, 16, 0, 0.5), generate_dataset(sampling, 5, 6, 1, 0.5)


def test_generate_dataset_deterministic(tiny_data):
    sampling = SamplingConfig(device_count=ShiftedPoissonParams(3, 2, 3))
    again = generate_dataset(sampling, 5, 6, 1, 0.5)
    test = tiny_data[1]
    assert np.array_equal(test.labels, again.labels)
    assert all(np.array_equal(a, b) for a, b in zip(test.features, again.features))
    assert test.features[0].shape[1:] == (48, 64)


def test_dataset_save_load(tmp_path, tiny_data):
    data = tiny_data[1]
    data.save(tmp_path / "d.npz")
    back = Dataset.load(tmp_path / "d.npz")
    assert back.scenes == data.scenes and np.array_equal(back.labels, data.labels)


def test_sweep_is_deterministic_and_resumable(tmp_path, tiny_data):
    train, test = tiny_data
    first = run_sweep(tiny_config(tmp_path / "a"), train, test)
    assert len(first.cells) == 4
    csv_a = (tmp_path / "a" / "report.csv").read_bytes()
    run_sweep(tiny_config(tmp_path / "b"), train, test)
    assert csv_a == (tmp_path / "b" / "report.csv").read_bytes()
    assert (tmp_path / "a" / "report.svg").read_bytes() == (tmp_path / "b" / "report.svg").read_bytes()
    for c in first.cells:
        assert (tmp_path / "a" / c.checkpoint_path).exists()
    # resume: everything cached, same report
    run_sweep(tiny_config(tmp_path / "a"), train, test, reuse=True)
    assert (tmp_path / "a" / "report.csv").read_bytes() == csv_a
