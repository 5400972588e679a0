import numpy as np
import pytest

from ibts import classifier as C
from ibts import datagen
from ibts import gradcore as gc
from ibts.checkpoint import CheckpointError
from oracles import central_diff, rel_err


@pytest.fixture(scope="module")
def data():
    return datagen.generate(datagen.GeneratorConfig("freqshapes", n_train=40, n_val=8, n_test=12, seed=5))


def tiny_model(encoder="attention", pool="mean", T=6, D=2, n_classes=3):
    cfg = C.ClassifierConfig(encoder=encoder, d_h=4, window=3, pool=pool, dropout=0.0)
    model = C.ClassifierModel(cfg, T, D, n_classes)
    model.head.weight.data = model.head.weight.data * 30.0
    return model.freeze()


def test_config_validation():
    with pytest.raises(ValueError):
        C.ClassifierConfig(d_h=3).validate(n_classes=4)
    with pytest.raises(ValueError):
        C.ClassifierConfig(dropout=1.0).validate()
    with pytest.raises(ValueError):
        C.ClassifierConfig(encoder="cnn").validate()
    with pytest.raises(ValueError):
        C.ClassifierConfig(pool="sum").validate()


@pytest.mark.parametrize("encoder", ["attention", "gru", "mlp"])
def test_untrained_output_near_uniform(encoder, data):
    model = C.ClassifierModel(C.ClassifierConfig(encoder=encoder), 50, 1, 4)
    P = C.predict_proba(model, data.X[:32])
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-6)
    assert np.all(P >= 0)
    assert np.max(np.abs(P.mean(0) - 0.25)) < 0.1


def test_predict_is_deterministic_and_checks_shape(data):
    model = C.ClassifierModel(C.ClassifierConfig(), 50, 1, 4)
    X = np.concatenate([data.X[:3], data.X[:3]])
    P = C.predict_proba(model, X)
    np.testing.assert_array_equal(P[:3], P[3:])
    np.testing.assert_array_equal(P, C.predict_proba(model, X))
    with pytest.raises(gc.ShapeError):
        C.predict_proba(model, np.zeros((2, 49, 1)))


@pytest.mark.parametrize("encoder", ["attention", "mlp"])
def test_overfits_ten_instances(encoder, data):
    sub = datagen.TimeSeriesDataset(data.X[:10], data.Y[:10], data.Q[:10],
                                    {"train": list(range(10)), "val": [], "test": []}, 4)
    cfg = C.ClassifierConfig(encoder=encoder, epochs=150, lr=1e-2, weight_decay=0.0, dropout=0.0, batch_size=10)
    model, report = C.train_classifier(cfg, sub)
    pred = C.predict_proba(model, sub.X).argmax(1)
    assert np.mean(pred == sub.Y) == 1.0
    assert len(report.epoch_loss) == 150


def test_non_finite_loss_aborts(data):
    X = data.X.copy()
    X[data.splits["train"][0], 0, 0] = np.nan
    bad = datagen.TimeSeriesDataset(X, data.Y, data.Q, data.splits, data.n_classes)
    with pytest.raises(C.TrainingAborted, match="non-finite loss"):
        C.train_classifier(C.ClassifierConfig(epochs=1), bad)


@pytest.mark.parametrize("encoder,pool", [("attention", "mean"), ("gru", "mean"), ("mlp", "max")])
def test_input_vjp_matches_finite_differences(encoder, pool):
    model = tiny_model(encoder, pool)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2, 6, 2))
    up = rng.normal(size=(2, 3))
    g = C.input_vjp(model, X, up)
    numeric = central_diff(lambda v: float(np.sum(C.predict_proba(model, v) * up)), X)
    assert rel_err(g, numeric) < 1e-4


def test_input_vjp_contract():
    model = tiny_model()
    X = np.random.default_rng(1).normal(size=(3, 6, 2))
    np.testing.assert_array_equal(C.input_vjp(model, X, np.zeros((3, 3))), 0.0)
    u, v = np.random.default_rng(2).normal(size=(2, 3, 3))
    lin = C.input_vjp(model, X, 2.0 * u - 0.5 * v)
    np.testing.assert_allclose(lin, 2.0 * C.input_vjp(model, X, u) - 0.5 * C.input_vjp(model, X, v), atol=1e-6)
    digest = model.param_digest()
    for _ in range(100):
        C.input_vjp(model, X, u)
    assert model.param_digest() == digest
    unfrozen = C.ClassifierModel(C.ClassifierConfig(d_h=4, window=3), 6, 2, 3)
    with pytest.raises(C.FrozenModelError):
        C.input_vjp(unfrozen, X, u)


def test_frozen_parameters_are_read_only():
    model = tiny_model()
    p = model.parameters()[0]
    with pytest.raises(ValueError):
        p.data[...] = 0.0


def test_checkpoint_round_trip(tmp_path, data):
    model, _ = C.train_classifier(C.ClassifierConfig(epochs=2), data)
    model.freeze()
    C.save_model(model, tmp_path / "m")
    back = C.load_model(tmp_path / "m")
    assert back.frozen
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    np.testing.assert_array_equal(C.predict_proba(model, data.X[:8]), C.predict_proba(back, data.X[:8]))


def test_checkpoint_errors(tmp_path, data):
    model = C.ClassifierModel(C.ClassifierConfig(), 50, 1, 4)
    C.save_model(model, tmp_path / "m")
    assert not C.load_model(tmp_path / "m").frozen
    victim = next((tmp_path / "m").glob("*.bin"))
    victim.write_bytes(victim.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="byte count mismatch"):
        C.load_model(tmp_path / "m")
    victim.unlink()
    with pytest.raises(CheckpointError, match="missing file"):
        C.load_model(tmp_path / "m")
    doc = (tmp_path / "m" / "model.json").read_text().replace('"format_version": 1', '"format_version": 9')
    (tmp_path / "m" / "model.json").write_text(doc)
    with pytest.raises(CheckpointError, match="format_version"):
        C.load_model(tmp_path / "m")
