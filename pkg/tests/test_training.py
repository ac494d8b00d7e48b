import math

import numpy as np
import pytest

import tsqat.autodiff as ad
from tsqat.autodiff import Tensor
from tsqat.model import LAYER_IDS, ModelConfig, QLinear, QLinearSpec, TransformerForecaster, make_preset
from tsqat.quant import FloatRange, apq_select
from tsqat.training import (AdamState, MinMaxNormalizer, TrainConfig, TrainingError, adam_step,
                            evaluate_rmse, fit_normalizer, rmse, train_qat)

TINY = ModelConfig.square(m=2, n=4, d_model=8, num_heads=2, dropout=0.0)


def toy_data(rows=64, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((rows, 4, 2))
    if positive:
        X = np.abs(X) + 0.1
    y = np.tanh(X[:, -1, 0]) * 0.5 + 0.1 * X[:, :, 1].mean(axis=1)
    return X, y


# --- normaliser -----------------------------------------------------------------

def test_normalizer_examples():
    norm = fit_normalizer(np.array([[0.0], [10.0]]))
    assert norm.transform(np.array([[5.0]]))[0, 0] == 0.5
    assert norm.transform(np.array([[12.0]]))[0, 0] == pytest.approx(1.2)


def test_normalizer_roundtrip_and_range():
    rng = np.random.default_rng(0)
    train = rng.uniform(-50, 50, (100, 4))
    norm = MinMaxNormalizer.fit(train)
    t = norm.transform(train)
    assert t.min() >= 0.0 and t.max() <= 1.0
    x = rng.uniform(-100, 100, (20, 4))
    np.testing.assert_allclose(norm.inverse_transform(norm.transform(x)), x, atol=1e-12)
    np.testing.assert_allclose(norm.inverse_transform(norm.transform(x[:, 3], cols=3), cols=3),
                               x[:, 3], atol=1e-12)


def test_normalizer_constant_column_warns():
    with pytest.warns(RuntimeWarning):
        norm = MinMaxNormalizer.fit(np.array([[1.0, 2.0], [1.0, 3.0]]))
    np.testing.assert_array_equal(norm.transform(np.array([[7.0, 2.5]])), [[0.0, 0.5]])


def test_normalizer_ignores_test_rows():
    rng = np.random.default_rng(1)
    train = rng.standard_normal((50, 3))
    a = MinMaxNormalizer.fit(train)
    test = rng.standard_normal((10, 3)) * 1000
    a.transform(test)
    b = MinMaxNormalizer.fit(train)
    np.testing.assert_array_equal(a.mins, b.mins)
    np.testing.assert_array_equal(a.maxs, b.maxs)
    c = MinMaxNormalizer.from_dict(a.to_dict())
    np.testing.assert_array_equal(c.maxs, a.maxs)


# --- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), TrainConfig())
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step():
    p = np.array([0.0])
    adam_step([p], [np.ones(1)], AdamState(), TrainConfig(lr=0.01))
    assert p[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_opposite_gradients():
    p = np.array([0.0])
    st = AdamState()
    cfg = TrainConfig()
    adam_step([p], [np.ones(1)], st, cfg)
    adam_step([p], [-np.ones(1)], st, cfg)
    assert st.m[0][0] == pytest.approx(0.9 * 0.1 - 0.1)
    assert st.v[0][0] > 0
    assert st.t == 2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


# --- training loop -----------------------------------------------------------

def test_convex_toy_step_reduces_loss():
    rng = np.random.default_rng(0)
    layer = QLinear(3, 1, rng)
    X = Tensor(rng.standard_normal((32, 3)))
    y = X.data @ np.array([[1.0], [-2.0], [0.5]])

    def loss():
        return ad.mse_loss(layer(X), y)

    before = loss()
    before.backward()
    adam_step([layer.weight.data, layer.bias.data], [layer.weight.grad, layer.bias.grad],
              AdamState(), TrainConfig(lr=1e-3))
    assert loss().item() < before.item()


def test_one_batch_epoch_reduces_loss():
    X, y = toy_data(32)
    model = TransformerForecaster(TINY, seed=0)
    before = np.mean((model.predict(X) - y) ** 2)
    train_qat(model, X, y, TrainConfig(epochs=1, batch_size=32, lr=1e-3, dropout=0.0))
    assert np.mean((model.predict(X) - y) ** 2) < before


def test_training_is_deterministic():
    X, y = toy_data()
    runs = []
    for _ in range(2):
        model = TransformerForecaster(TINY, make_preset("sq+apq"), seed=3)
        h = train_qat(model, X, y, TrainConfig(epochs=3, batch_size=16, dropout=0.2, seed=3))
        runs.append((h, model.predict(X)))
    (h1, p1), (h2, p2) = runs
    assert h1.loss == h2.loss
    assert h1.decisions == h2.decisions
    np.testing.assert_array_equal(p1, p2)


def test_disabled_quantisation_matches_float_training():
    X, y = toy_data()
    off = make_preset("all-aq")
    off.layers = {lid: QLinearSpec.disabled() for lid in LAYER_IDS}
    cfg = TrainConfig(epochs=3, batch_size=16, seed=1)
    h_float = train_qat(TransformerForecaster(TINY, seed=1), X, y, cfg)
    h_off = train_qat(TransformerForecaster(TINY, off, seed=1), X, y, cfg)
    assert h_float.loss == h_off.loss


def test_early_stopping_restores_best():
    X, y = toy_data()
    model = TransformerForecaster(TINY, seed=2)
    h = train_qat(model, X, y, TrainConfig(epochs=40, batch_size=64, lr=0.05, patience=2, seed=2))
    assert h.best_loss == min(h.loss)
    assert h.best_epoch == int(np.argmin(h.loss))
    assert len(h.loss) <= 40
    if h.stopped_early:
        assert len(h.loss) - 1 - h.best_epoch == 2


def test_apq_symmetric_inputs_choose_sq():
    rng = np.random.default_rng(0)
    X = rng.choice([-1.0, 1.0], size=(32, 4, 2))
    X[:, 0, 0], X[:, 0, 1] = -1.0, 1.0
    y = rng.standard_normal(32)
    model = TransformerForecaster(TINY, make_preset("sq+apq"), seed=0)
    h = train_qat(model, X, y, TrainConfig(epochs=2, batch_size=8, dropout=0.0))
    logged = [d.scheme for d in h.decisions if d.layer == "L1" and d.obj == "inputs"]
    assert len(logged) == 8 and set(logged) == {"SQ"}


def test_apq_positive_inputs_choose_aq():
    X, y = toy_data(positive=True)
    model = TransformerForecaster(TINY, make_preset("sq+apq"), seed=0)
    h = train_qat(model, X, y, TrainConfig(epochs=2, batch_size=16, dropout=0.0))
    logged = [d.scheme for d in h.decisions if d.layer == "L1" and d.obj == "inputs"]
    assert logged and set(logged) == {"AQ"}
    l7 = {d.scheme for d in h.decisions if d.layer == "L7" and d.obj == "inputs"}
    assert l7 == {"AQ"}


def test_apq_log_replays():
    X, y = toy_data()
    model = TransformerForecaster(TINY, make_preset("sq+apq"), seed=4)
    h = train_qat(model, X, y, TrainConfig(epochs=2, batch_size=16, apq_threshold=0.3))
    assert len(h.decisions) == 16 * 2 * 4
    for d in h.decisions:
        assert apq_select(FloatRange(d.beta, d.alpha), 0.3).value == d.scheme


def test_no_decisions_without_adaptive_objects():
    X, y = toy_data()
    h = train_qat(TransformerForecaster(TINY, make_preset("all-aq")), X, y,
                  TrainConfig(epochs=1, batch_size=32))
    assert h.decisions == []


def test_training_errors():
    model = TransformerForecaster(TINY)
    with pytest.raises(TrainingError):
        train_qat(model, np.zeros((0, 4, 2)), np.zeros(0))
    X, y = toy_data(8)
    y[0] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_qat(model, X, y, TrainConfig(epochs=1))


# --- RMSE ----------------------------------------------------------------------

def test_rmse_examples():
    t = np.array([1.0, 2.0, 3.0])
    assert rmse(t, t) == 0.0
    assert rmse(t + 1, t) == pytest.approx(1.0)
    assert rmse(np.array([3.0, 4.0]), np.zeros(2)) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        rmse(np.zeros(0), np.zeros(0))


def test_evaluate_rmse_original_units():
    norm = MinMaxNormalizer(np.array([0.0, 0.0]), np.array([1.0, 10.0]))
    X, _ = toy_data(2)
    model = TransformerForecaster(TINY)
    pred = model.predict(X)
    y_norm = pred - np.array([0.3, 0.4])
    assert evaluate_rmse(model, X, y_norm, norm) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        evaluate_rmse(model, X[:0], y_norm[:0], norm)
