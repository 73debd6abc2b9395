import json
from dataclasses import replace

import numpy as np
import pytest

from builders import ConstantChain, synthetic_dataset
from config import ChainConfig, GbdtHyperparams, MlpHyperparams
from picking.common import (
    DataFormatError,
    DimensionMismatchError,
    DivergenceError,
    EmptyDatasetError,
    ModelLoadError,
)
from picking.learn import (
    AutoregressiveChain,
    MlpModel,
    load_chain,
    predict_chain,
    rmse_by_dimension,
    save_chain,
    train_chain,
    train_gbdt,
    train_mlp,
)


@pytest.fixture
def linear_rows():
    rng = np.random.default_rng(0)
    X = rng.uniform(0.0, 1.0, size=(1000, 5))
    return X, X[:, 0].copy()


def small_dataset(n=60, seed=3):
    """Pairs whose deltas depend on the first two features"""
    dataset = synthetic_dataset(n=n, seed=seed)
    pairs = []
    for p in dataset.train:
        delta = (0.01 * np.tanh(p.phi[0]), -0.01 * np.tanh(p.phi[1]), 0.1 * np.tanh(p.phi[0] + p.phi[1]))
        pairs.append(replace(p, delta=delta))
    return replace(dataset, train=pairs, test=pairs[: n // 4])


# ——— gradient boosting ———

def test_zero_rounds_predicts_target_mean(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=0))
    assert np.allclose(model.predict(X), y.mean())
    assert model.history == [pytest.approx(float(np.var(y)))]


def test_boosting_fits_linear_target(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=200, max_depth=3, learning_rate=0.2), seed=1)
    rmse = np.sqrt(np.mean((model.predict(X) - y) ** 2))
    assert rmse < 0.01


def test_train_mse_never_increases(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=40), seed=2)
    assert len(model.history) == 41
    assert all(b <= a + 1e-12 for a, b in zip(model.history, model.history[1:]))


def test_trees_respect_depth_and_structure(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=5, max_depth=2), seed=3)
    for tree in model.trees:
        assert tree.depth() <= 2
        internal = tree.feature >= 0
        assert np.all(tree.left[internal] >= 0) and np.all(tree.right[internal] >= 0)
        assert np.all(np.isfinite(tree.value))


def test_monotone_feature_transform_keeps_predictions(linear_rows):
    X, y = linear_rows
    hp = GbdtHyperparams(n_rounds=20, subsample=1.0)
    warped = X.copy()
    warped[:, 0] = np.exp(3.0 * warped[:, 0])
    plain = train_gbdt(X, y, hp, seed=4).predict(X)
    transformed = train_gbdt(warped, y, hp, seed=4).predict(warped)
    assert np.allclose(plain, transformed, atol=1e-12)


def test_stacked_ensemble_matches_tree_by_tree_sum(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=30, max_depth=4), seed=7)
    expected = model.base_prediction + model.learning_rate * sum(tree.predict(X) for tree in model.trees)
    assert np.allclose(model.predict(X), expected, rtol=0.0, atol=1e-12)


def test_stacked_arrays_follow_added_trees(linear_rows):
    X, y = linear_rows
    model = train_gbdt(X, y, GbdtHyperparams(n_rounds=4), seed=8)
    before = model.predict(X[:5])
    extra = model.trees[0]
    model.trees.append(extra)
    assert model.stacked().n_trees == 5
    assert np.allclose(model.predict(X[:5]), before + model.learning_rate * extra.predict(X[:5]), atol=1e-12)


def test_gbdt_is_seeded(linear_rows):
    X, y = linear_rows
    a = train_gbdt(X, y, GbdtHyperparams(n_rounds=10), seed=5).predict(X)
    b = train_gbdt(X, y, GbdtHyperparams(n_rounds=10), seed=5).predict(X)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("rows, targets, error", [
    (np.zeros((5, 3)), np.zeros(5), EmptyDatasetError),
    (np.zeros((0, 3)), np.zeros(0), EmptyDatasetError),
    (np.zeros((12, 3)), np.zeros(11), DimensionMismatchError),
    (np.full((12, 3), np.nan), np.zeros(12), DataFormatError),
])
def test_training_data_is_validated(rows, targets, error):
    with pytest.raises(error):
        train_gbdt(rows, targets)


# ——— multi-layer perceptron ———

def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    model = MlpModel.initialize(5, (35, 2), rng, np.zeros(5), np.ones(5), 0.1)
    model.params["W3"] = rng.normal(size=(2, 1))
    model.params["b2"] = np.full(2, 0.5)
    Z = rng.normal(size=(8, 5))
    y = rng.normal(size=8)
    _, grads = model.loss_and_grads(Z, y)

    step = 1e-5
    for name, param in model.params.items():
        flat = param.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up, _ = model.loss_and_grads(Z, y)
            flat[i] = original - step
            down, _ = model.loss_and_grads(Z, y)
            flat[i] = original
            numeric[i] = (up - down) / (2 * step)
        analytic = grads[name].reshape(-1)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4, name


def test_mlp_zero_targets():
    X = np.random.default_rng(7).normal(size=(50, 6))
    model = train_mlp(X, np.zeros(50), MlpHyperparams(epochs=20), seed=0)
    assert np.all(np.abs(model.predict(X)) < 1e-3)


def test_mlp_layer_sizes():
    X = np.random.default_rng(8).normal(size=(30, 78))
    model = train_mlp(X, X[:, 0], MlpHyperparams(epochs=2), seed=0)
    assert model.layer_sizes == [78, 35, 2, 1]
    assert all(np.all(np.isfinite(p)) for p in model.params.values())


def test_mlp_is_seeded():
    X = np.random.default_rng(9).normal(size=(40, 4))
    y = X[:, 0] - X[:, 1]
    a = train_mlp(X, y, MlpHyperparams(epochs=5), seed=3)
    b = train_mlp(X, y, MlpHyperparams(epochs=5), seed=3)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])


def test_mlp_learns(linear_rows):
    X, y = linear_rows
    model = train_mlp(X, y, MlpHyperparams(epochs=30), seed=1)
    assert model.history[-1] < model.history[0]


def test_mlp_divergence_names_epoch(monkeypatch):
    def broken(self, Z, y):
        return float("nan"), {}

    monkeypatch.setattr(MlpModel, "loss_and_grads", broken)
    X = np.random.default_rng(10).normal(size=(20, 3))
    with pytest.raises(DivergenceError, match="epoch 1"):
        train_mlp(X, X[:, 0], MlpHyperparams(epochs=3), seed=0)


# ——— chain ———

def test_chain_member_dimensions(zero_chain):
    assert zero_chain.g_x.input_dim == 78
    assert zero_chain.g_y.input_dim == 79
    assert zero_chain.g_r.input_dim == 80


def test_zero_deltas_predict_zero(zero_chain):
    phi = np.random.default_rng(11).normal(size=(10, 78))
    assert np.all(np.abs(zero_chain.predict_batch(phi)) < 1e-3)


def test_zero_deltas_mlp_chain():
    config = ChainConfig(kind="mlp", mlp=MlpHyperparams(epochs=3))
    chain = train_chain(synthetic_dataset(), "mlp", config, seed=1)
    phi = np.random.default_rng(12).normal(size=(5, 78))
    assert np.all(np.abs(chain.predict_batch(phi)) < 1e-3)


def test_zero_round_chain_predicts_mean_deltas():
    dataset = synthetic_dataset(delta=(0.01, -0.02, 0.3))
    chain = train_chain(dataset, "gbdt", ChainConfig(gbdt=GbdtHyperparams(n_rounds=0)))
    assert predict_chain(chain, dataset.train[0].phi) == pytest.approx((0.01, -0.02, 0.3))


def test_predict_chain_is_pure(zero_chain):
    phi = np.random.default_rng(13).normal(size=78)
    assert predict_chain(zero_chain, phi) == predict_chain(zero_chain, phi.copy())


def test_chain_rejects_wrong_length(zero_chain):
    with pytest.raises(DimensionMismatchError):
        predict_chain(zero_chain, np.zeros(77))
    with pytest.raises(DimensionMismatchError):
        zero_chain.predict_batch(np.zeros((2, 79)))


def test_chain_members_must_line_up(zero_chain):
    with pytest.raises(DimensionMismatchError):
        AutoregressiveChain(g_x=zero_chain.g_y, g_y=zero_chain.g_y, g_r=zero_chain.g_r, model_kind="gbdt")


def test_without_teacher_forcing():
    config = ChainConfig(teacher_forcing=False, gbdt=GbdtHyperparams(n_rounds=5))
    chain = train_chain(small_dataset(), "gbdt", config, seed=2)
    assert not chain.teacher_forcing
    assert chain.predict_batch(np.zeros((3, 78))).shape == (3, 3)


def test_threaded_training_matches_serial():
    dataset = small_dataset()
    config = ChainConfig(gbdt=GbdtHyperparams(n_rounds=8))
    serial = train_chain(dataset, "gbdt", config, seed=4, threads=1)
    threaded = train_chain(dataset, "gbdt", config, seed=4, threads=3)
    X = np.vstack([p.phi for p in dataset.train])
    assert np.array_equal(serial.predict_batch(X), threaded.predict_batch(X))


def test_boosted_chain_beats_mean_on_train():
    dataset = small_dataset()
    fitted = train_chain(dataset, "gbdt", ChainConfig(gbdt=GbdtHyperparams(n_rounds=50)), seed=0)
    baseline = train_chain(dataset, "gbdt", ChainConfig(gbdt=GbdtHyperparams(n_rounds=0)), seed=0)
    fit_x, _, fit_r = rmse_by_dimension(fitted, dataset.train)
    base_x, _, base_r = rmse_by_dimension(baseline, dataset.train)
    assert fit_x < base_x
    assert fit_r < base_r


# ——— rmse ———

def test_perfect_predictor_has_zero_rmse():
    dataset = synthetic_dataset(delta=(0.01, 0.02, -0.1))
    assert rmse_by_dimension(ConstantChain((0.01, 0.02, -0.1)), dataset.train) == (0.0, 0.0, 0.0)


def test_rmse_closed_form():
    pairs = synthetic_dataset(n=2).train
    pairs = [replace(p, delta=(d, 0.0, 0.0)) for p, d in zip(pairs, (0.01, 0.02))]
    rx, ry, rr = rmse_by_dimension(ConstantChain((0.0, 0.0, 0.0)), pairs)
    assert rx == pytest.approx(np.sqrt((0.0001 + 0.0004) / 2))
    assert ry == 0.0 and rr == 0.0


# ——— persistence ———

@pytest.mark.parametrize("kind, config", [
    ("gbdt", ChainConfig(gbdt=GbdtHyperparams(n_rounds=5))),
    ("mlp", ChainConfig(kind="mlp", mlp=MlpHyperparams(epochs=3))),
])
def test_save_load_predicts_identically(tmp_path, kind, config):
    dataset = small_dataset()
    chain = train_chain(dataset, kind, config, seed=6)
    path = tmp_path / f"model_{kind}.json"
    save_chain(path, chain)
    loaded = load_chain(path)
    X = np.vstack([p.phi for p in dataset.train])
    assert loaded.model_kind == kind
    assert np.array_equal(chain.predict_batch(X), loaded.predict_batch(X))


def test_load_missing_model(tmp_path):
    with pytest.raises(ModelLoadError):
        load_chain(tmp_path / "absent.json")


def test_load_wrong_kind(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"kind": "trace", "format_version": 1}))
    with pytest.raises(DataFormatError):
        load_chain(path)


def test_load_malformed_members(tmp_path, zero_chain):
    payload = zero_chain.to_dict()
    payload["members"]["g_y"] = {"type": "forest"}
    path = tmp_path / "model.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(ModelLoadError):
        load_chain(path)
