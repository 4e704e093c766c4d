import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spodrom.errors import CorruptFileError, FormatError, TrainingDivergedError
from spodrom.nn import (MLP, AdamState, ConvNet, LSTMRegressor, ParamStore, TrainConfig, adam_step,
                        conv2d_apply, dense_apply, finite_difference_check, fit, glorot_uniform,
                        load_params, lstm_step, mse_loss, write_params)


# -- dense ------------------------------------------------------------------

def test_dense_identity_and_bias():
    x = np.array([[1.0, -2.0, 3.0]])
    y, _ = dense_apply(np.eye(3), np.zeros(3), x)
    np.testing.assert_array_equal(y, x)
    y, _ = dense_apply(np.zeros((2, 3)), np.array([0.3, -1.0]), x, "tanh")
    np.testing.assert_allclose(y, np.tanh([[0.3, -1.0]]))


def test_dense_hand_oracle(rng):
    w, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
    x = rng.standard_normal((4, 2))
    y, _ = dense_apply(w, b, x, "tanh")
    for s in range(4):
        for i in range(3):
            ref = math.tanh(b[i] + sum(w[i, j] * x[s, j] for j in range(2)))
            assert abs(y[s, i] - ref) < 1e-12


def test_dense_shape_errors():
    with pytest.raises(ValueError):
        dense_apply(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 4)))
    with pytest.raises(ValueError):
        dense_apply(np.zeros((2, 3)), np.zeros(2), np.zeros((1, 3)), "sigmoid")


# -- LSTM -------------------------------------------------------------------

def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def test_lstm_zero_weights():
    h, s, (hz, sp, i, f, o, g, ts) = lstm_step(np.zeros((8, 5)), np.zeros(8), np.zeros((1, 2)),
                                               np.zeros((1, 2)), np.ones((1, 3)))
    assert np.all(i == 0.5) and np.all(f == 0.5) and np.all(o == 0.5)
    assert np.all(s == 0) and np.all(h == 0)


def test_lstm_forget_saturation():
    b = np.zeros(8)
    b[2:4] = 50.0
    v = np.array([[0.7, -0.3]])
    _, s, _ = lstm_step(np.zeros((8, 3)), b, np.zeros((1, 2)), v, np.ones((1, 1)))
    np.testing.assert_allclose(s, v, atol=1e-6)


def test_lstm_hand_step():
    w = np.array([[0.1, -0.2, 0.3], [0.0, 0.1, -0.1],     # i
                  [0.2, 0.2, 0.2], [-0.3, 0.1, 0.05],     # f
                  [0.05, -0.05, 0.4], [0.1, 0.3, -0.2],   # o
                  [0.25, 0.1, -0.3], [-0.1, 0.2, 0.15]])  # s
    b = np.array([0.01, -0.02, 1.0, 1.0, 0.0, 0.1, -0.1, 0.05])
    h0, s0, z = [0.5, -0.4], [0.2, 0.1], [0.8]
    h, s, _ = lstm_step(w, b, np.array([h0]), np.array([s0]), np.array([z]))
    inp = h0 + z
    pre = [b[r] + sum(w[r, c] * inp[c] for c in range(3)) for r in range(8)]
    for j in range(2):
        i, f, o = _sig(pre[j]), _sig(pre[2 + j]), _sig(pre[4 + j])
        g = math.tanh(pre[6 + j])
        s_ref = f * s0[j] + i * g
        assert abs(s[0, j] - s_ref) < 1e-12
        assert abs(h[0, j] - o * math.tanh(s_ref)) < 1e-12


def test_lstm_init():
    m = LSTMRegressor(3, 4, seed=0)
    b = m.params["b_lstm"]
    assert np.all(b[4:8] == 1.0) and np.all(b[:4] == 0) and np.all(b[8:] == 0)
    lim = np.sqrt(6.0 / (4 + 3 + 4))
    assert np.max(np.abs(m.params["W_lstm"])) <= lim


# -- conv -------------------------------------------------------------------

def test_conv_delta_identity(rng):
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    x = rng.standard_normal((2, 1, 5, 6))
    y, _ = conv2d_apply(k, np.zeros(1), x)
    np.testing.assert_array_equal(y, x)


def test_conv_zero_kernel_relu():
    y, _ = conv2d_apply(np.zeros((1, 2, 3, 3)), np.array([-0.5]), np.ones((2, 4, 4)), "relu")
    assert np.all(y == 0)
    y, _ = conv2d_apply(np.zeros((1, 2, 3, 3)), np.array([0.7]), np.ones((2, 4, 4)), "relu")
    assert np.all(y == 0.7)


def test_conv_patch_sum(rng):
    x = rng.standard_normal((1, 5, 5))
    y, _ = conv2d_apply(np.ones((1, 1, 3, 3)), np.zeros(1), x)
    for r in range(5):
        for c in range(5):
            ref = sum(x[0, i, j] for i in range(max(0, r - 1), min(5, r + 2))
                      for j in range(max(0, c - 1), min(5, c + 2)))
            assert abs(y[0, r, c] - ref) < 1e-12


def test_conv_cross_correlation_orientation():
    # not flipped: output at the centre picks x[r + di, c + dj] * k[di + 1, dj + 1]
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 0, 2] = 1.0
    x = np.arange(25.0).reshape(1, 5, 5)
    y, _ = conv2d_apply(k, np.zeros(1), x)
    assert y[0, 2, 2] == x[0, 1, 3]


def test_conv_bad_kernel():
    with pytest.raises(ValueError):
        conv2d_apply(np.zeros((1, 1, 2, 2)), np.zeros(1), np.zeros((1, 4, 4)))
    with pytest.raises(ValueError):
        conv2d_apply(np.zeros((1, 1, 3, 3)), np.zeros(1), np.zeros((1, 4, 4)), padding=0)


@given(st.integers(0, 10 ** 6))
def test_conv_translation_covariance(seed):
    r = np.random.default_rng(seed)
    net = ConvNet([2, 3, 1], 3, seed=seed)
    x = r.standard_normal((1, 2, 12, 12))
    shifted = np.roll(x, 1, axis=3)
    y0, y1 = net.predict(x), net.predict(shifted)
    # the receptive field of two 3x3 layers reaches 2 cells; compare well inside
    inner = np.s_[:, :, 2:-2, 3:-2]
    assert np.max(np.abs(y1[inner] - np.roll(y0, 1, axis=3)[inner])) <= 1e-10


# -- optimizer and loss -------------------------------------------------------

def test_adam_first_step_sign():
    cfg = TrainConfig(learning_rate=0.01, eps=1e-12)
    p = ParamStore({"a": np.array([1.0, -2.0, 0.5])})
    g = {"a": np.array([3.0, -0.2, 1e-3])}
    adam_step(AdamState(p), p, g, cfg)
    np.testing.assert_allclose(p["a"], np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(g["a"]),
                               rtol=1e-6)


def test_adam_zero_gradient():
    p = ParamStore({"a": np.array([1.0, 2.0])})
    st_ = AdamState(p)
    for _ in range(5):
        adam_step(st_, p, {"a": np.zeros(2)}, TrainConfig())
    np.testing.assert_array_equal(p["a"], [1.0, 2.0])


def test_adam_scalar_trace():
    cfg = TrainConfig(learning_rate=0.1)
    p = ParamStore({"t": np.array(1.0)})
    state = AdamState(p)
    theta, m, v = 1.0, 0.0, 0.0
    prev = abs(theta)
    for t in range(1, 11):
        adam_step(state, p, {"t": np.array(2 * float(p["t"]))}, cfg)
        g = 2 * theta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert float(p["t"]) == pytest.approx(theta, abs=1e-14)
        assert abs(theta) < prev
        prev = abs(theta)


def test_adam_rejects_nonfinite():
    p = ParamStore({"a": np.zeros(2)})
    with pytest.raises(TrainingDivergedError):
        adam_step(AdamState(p), p, {"a": np.array([np.nan, 0.0])}, TrainConfig())


def test_mse_cases(rng):
    a = rng.standard_normal((3, 4))
    assert mse_loss(a, a)[0] == 0.0
    assert mse_loss(np.ones((1, 7)), np.zeros((1, 7)))[0] == 7.0
    p, t = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    _, grad = mse_loss(p, t)
    h = 1e-6
    for idx in [(0, 0), (1, 3), (0, 4)]:
        pp, pm = p.copy(), p.copy()
        pp[idx] += h
        pm[idx] -= h
        fd = (mse_loss(pp, t)[0] - mse_loss(pm, t)[0]) / (2 * h)
        assert grad[idx] == pytest.approx(fd, rel=1e-7)
    mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    loss, grad = mse_loss(p, t, mask)
    assert loss == pytest.approx(np.sum(((p - t) * mask) ** 2) / 2)
    assert np.all(grad[:, 1] == 0)


# -- gradient checks -----------------------------------------------------------

def test_gradcheck_dense(rng):
    m = MLP([4, 6, 3, 4], ["tanh", "linear", "tanh"], seed=1)
    rep = finite_difference_check(m, rng.standard_normal((5, 4)), rng.standard_normal((5, 4)))
    assert rep.passed, str(rep)


def test_gradcheck_lstm(rng):
    m = LSTMRegressor(3, 4, n_out=2, seed=2)
    rep = finite_difference_check(m, rng.standard_normal((4, 3, 3)), rng.standard_normal((4, 2)))
    assert rep.passed, str(rep)


def test_gradcheck_conv(rng):
    m = ConvNet([2, 3, 1], 3, seed=3, mask=rng.random((5, 6)) > 0.2)
    x = rng.standard_normal((2, 2, 5, 6))
    x += 1e-3 * np.sign(x)
    rep = finite_difference_check(m, x, np.abs(rng.standard_normal((2, 1, 5, 6))), tolerance=1e-4)
    assert rep.passed, str(rep)


def test_gradcheck_reports_wrong_gradient(rng):
    m = MLP([2, 2], ["linear"], seed=0)
    orig = m.loss_and_grad

    def broken(x, y):
        loss, g = orig(x, y)
        g["W0"] = g["W0"] * 1.5
        return loss, g
    m.loss_and_grad = broken
    rep = finite_difference_check(m, rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    assert not rep.passed and rep.offending == ["W0"]


# -- params -------------------------------------------------------------------

def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), (200, 50), 50, 200)
    lim = np.sqrt(6 / 250)
    assert np.max(np.abs(w)) <= lim and np.max(np.abs(w)) > 0.9 * lim


def test_param_store_contract():
    p = ParamStore({"w": np.zeros((2, 2))}, seed=4)
    with pytest.raises(ValueError):
        p["w"] = np.zeros(3)
    with pytest.raises(KeyError):
        p["v"] = np.zeros(1)
    snap = p.snapshot()
    p["w"] = np.ones((2, 2))
    p.restore(snap)
    assert np.all(p["w"] == 0)
    with pytest.raises(ValueError):
        ParamStore({"w": [np.nan]})


def test_params_file(tmp_path):
    p = ParamStore({"a/W": np.arange(6.0).reshape(2, 3), "a/b": np.array([0.5]), "c": np.array(2.0)},
                   seed=9)
    write_params(tmp_path / "p.snnp", p, {"kind": "demo", "x": [1, 2]})
    back, meta = load_params(tmp_path / "p.snnp")
    assert back.equal(p) and back.seed == 9 and back.init == "glorot_uniform"
    assert meta == {"kind": "demo", "x": [1, 2]}
    sub = back.prefixed("a/")
    assert sub.names() == ["W", "b"]
    sub["b"] = [1.5]
    assert back["a/b"][0] == 1.5  # views share memory
    raw = (tmp_path / "p.snnp").read_bytes()
    (tmp_path / "q.snnp").write_bytes(raw[:30])
    with pytest.raises(CorruptFileError):
        load_params(tmp_path / "q.snnp")
    (tmp_path / "q.snnp").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(FormatError):
        load_params(tmp_path / "q.snnp")


# -- training -----------------------------------------------------------------

def _toy(rng, n=200):
    x = rng.standard_normal((n, 3))
    return x, np.tanh(x @ np.array([[1.0], [-0.5], [0.25]]))


def test_fit_reduces_loss_and_is_reproducible(rng):
    x, y = _toy(rng)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=16, epochs=30, seed=7)
    a, b = MLP([3, 8, 1], ["tanh", "linear"], seed=1), MLP([3, 8, 1], ["tanh", "linear"], seed=1)
    ha, hb = fit(a, x, y, cfg), fit(b, x, y, cfg)
    assert a.params.equal(b.params) and ha.val == hb.val
    assert ha.best_val < 0.2 * ha.val[0]


def test_fit_early_stopping_restores_best(rng):
    x, y = _toy(rng)
    noise = rng.standard_normal(y.shape) * 3
    cfg = TrainConfig(learning_rate=5e-2, batch_size=8, epochs=300, patience=5, seed=0)
    m = MLP([3, 32, 1], ["tanh", "linear"], seed=0)
    h = fit(m, x[:150], y[:150] + noise[:150], cfg, x[150:], y[150:])
    assert h.stopped_early and len(h.val) < 300
    final = mse_loss(m.predict(x[150:]), y[150:])[0]
    assert final == pytest.approx(h.best_val, rel=1e-12)
    assert h.best_epoch == int(np.argmin(h.val))


def test_fit_divergence_raises(rng):
    x, y = _toy(rng)
    m = MLP([3, 4, 1], ["tanh", "linear"], seed=0)
    with pytest.raises(TrainingDivergedError), np.errstate(all="ignore"):
        fit(m, x, y * np.inf, TrainConfig(epochs=2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(validation_fraction=1.0)
    cfg = TrainConfig(batch_size=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
