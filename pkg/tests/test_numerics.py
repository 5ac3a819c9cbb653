import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odernn import numerics as nx
from conftest import fd, rel_err


def naive_mlp(params, x):
    n = len(params) // 2
    h = np.asarray(x, dtype=float)
    for k in range(n):
        h = params[f"w{k}"] @ h + params[f"b{k}"]
        if k < n - 1:
            h = np.tanh(h)
    return h


def naive_lstm(params, x, h, c):
    W, b = params["W"], params["b"]
    D = len(h)
    z = W @ np.concatenate([x, h]) + b
    sig = lambda u: 1 / (1 + np.exp(-u))  # noqa: E731
    i, f, o, g = sig(z[:D]), sig(z[D:2 * D]), sig(z[2 * D:3 * D]), np.tanh(z[3 * D:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def test_rng_streams_are_reproducible_and_distinct():
    assert np.array_equal(nx.seeded_rng(3).normal(size=5), nx.seeded_rng(3).normal(size=5))
    a = nx.child_rng(3, 0).normal(size=5)
    assert np.array_equal(a, nx.child_rng(3, 0).normal(size=5))
    assert not np.array_equal(a, nx.child_rng(3, 1).normal(size=5))


def test_sigmoid_is_stable_at_extremes():
    s = nx.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s))
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_mlp_zero_weights_give_zero_output(rng):
    p = {k: np.zeros_like(v) for k, v in nx.init_mlp(rng, [3, 5, 2]).items()}
    assert np.array_equal(nx.mlp_forward(p, rng.normal(size=3)), np.zeros(2))


def test_mlp_unit_net_at_zero():
    p = {"w0": np.ones((1, 1)), "b0": np.zeros(1), "w1": np.ones((1, 1)), "b1": np.zeros(1)}
    assert nx.mlp_forward(p, np.zeros(1))[0] == 0.0


def test_mlp_matches_naive_loop(rng):
    p = nx.init_mlp(rng, [4, 7, 6, 3])
    x = rng.normal(size=4)
    np.testing.assert_allclose(nx.mlp_forward(p, x), naive_mlp(p, x), rtol=1e-13, atol=1e-15)
    xb = rng.normal(size=(5, 4))
    np.testing.assert_allclose(nx.mlp_forward(p, xb), np.stack([naive_mlp(p, r) for r in xb]), rtol=1e-13)


def test_mlp_vjp_zero_cotangent(rng):
    p = nx.init_mlp(rng, [4, 8, 4])
    xg, g = nx.mlp_vjp(p, rng.normal(size=4), np.zeros(4))
    assert not np.any(xg)
    assert all(not np.any(v) for v in g.values())


def test_mlp_vjp_linear_net_is_transpose(rng):
    p = nx.init_mlp(rng, [3, 2])
    w = rng.normal(size=2)
    xg, _ = nx.mlp_vjp(p, rng.normal(size=3), w)
    np.testing.assert_allclose(xg, p["w0"].T @ w)


def test_mlp_vjp_finite_differences_4_8_4(rng):
    p = nx.init_mlp(rng, [4, 8, 4])
    x = rng.normal(size=4)
    w = rng.normal(size=4)
    loss = lambda: float(w @ nx.mlp_forward(p, x))  # noqa: E731
    xg, g = nx.mlp_vjp(p, x, w)
    assert rel_err(xg, fd(loss, x)) < 1e-5
    for k in p:
        assert rel_err(g[k], fd(loss, p[k])) < 1e-5, k


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 31))
def test_linear_vjp_matches_finite_differences(B, n_in, n_out, seed):
    r = np.random.default_rng(seed)
    p = nx.init_linear(r, n_in, n_out)
    x = r.normal(size=(B, n_in))
    w = r.normal(size=(B, n_out))
    loss = lambda: float(np.sum(w * nx.linear_forward(p, x)))  # noqa: E731
    xg, g = nx.linear_vjp(p, x, w)
    assert rel_err(xg, fd(loss, x)) < 1e-6
    assert rel_err(g["weight"], fd(loss, p["weight"])) < 1e-6
    assert rel_err(g["bias"], fd(loss, p["bias"])) < 1e-6


def test_lstm_zero_params_give_zero_state(rng):
    p = {k: np.zeros_like(v) for k, v in nx.init_lstm(rng, 3, 4).items()}
    h, c, _ = nx.lstm_cell_forward(p, rng.normal(size=3), rng.normal(size=4), np.zeros(4))
    assert not np.any(h) and not np.any(c)


def test_lstm_saturated_forget_gate_keeps_cell(rng):
    p = {k: np.zeros_like(v) for k, v in nx.init_lstm(rng, 3, 4).items()}
    p["b"][4:8] = 20.0
    c = rng.normal(size=4)
    _, c_new, _ = nx.lstm_cell_forward(p, rng.normal(size=3), rng.normal(size=4), c)
    np.testing.assert_allclose(c_new, c, atol=1e-8)


def test_lstm_matches_naive(rng):
    p = nx.init_lstm(rng, 3, 5)
    x, h, c = rng.normal(size=3), rng.normal(size=5), rng.normal(size=5)
    h1, c1, _ = nx.lstm_cell_forward(p, x, h, c)
    h2, c2 = naive_lstm(p, x, h, c)
    np.testing.assert_allclose(h1, h2, rtol=1e-13)
    np.testing.assert_allclose(c1, c2, rtol=1e-13)


def test_lstm_gate_views_share_memory(rng):
    p = nx.init_lstm(rng, 2, 3)
    v = nx.lstm_gate_views(p)
    assert v["forget"][0].shape == (3, 5)
    assert np.all(v["forget"][1] == 1.0)
    v["output"][0][0, 0] = 42.0
    assert p["W"][6, 0] == 42.0


def test_lstm_backward_zero_cotangents(rng):
    p = nx.init_lstm(rng, 3, 4)
    _, _, cache = nx.lstm_cell_forward(p, rng.normal(size=3), rng.normal(size=4), rng.normal(size=4))
    out = nx.lstm_cell_backward(p, cache, np.zeros(4), np.zeros(4))
    assert all(not np.any(a) for a in out[:3])
    assert all(not np.any(v) for v in out[3].values())


def test_lstm_backward_finite_differences(rng):
    p = nx.init_lstm(rng, 3, 4)
    x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    wh, wc = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

    def loss():
        h1, c1, _ = nx.lstm_cell_forward(p, x, h, c)
        return float(np.sum(wh * h1) + np.sum(wc * c1))

    _, _, cache = nx.lstm_cell_forward(p, x, h, c)
    xg, hg, cg, g = nx.lstm_cell_backward(p, cache, wh, wc)
    assert rel_err(xg, fd(loss, x)) < 1e-5
    assert rel_err(hg, fd(loss, h)) < 1e-5
    assert rel_err(cg, fd(loss, c)) < 1e-5
    for k in p:
        assert rel_err(g[k], fd(loss, p[k])) < 1e-5


def test_lstm_two_step_chain(rng):
    p = nx.init_lstm(rng, 2, 3)
    x1, x2 = rng.normal(size=2), rng.normal(size=2)
    h0, c0 = rng.normal(size=3), rng.normal(size=3)
    w = rng.normal(size=3)

    def loss():
        h1, c1, _ = nx.lstm_cell_forward(p, x1, h0, c0)
        h2, _, _ = nx.lstm_cell_forward(p, x2, h1, c1)
        return float(w @ h2)

    h1, c1, k1 = nx.lstm_cell_forward(p, x1, h0, c0)
    _, _, k2 = nx.lstm_cell_forward(p, x2, h1, c1)
    _, hb, cb, g2 = nx.lstm_cell_backward(p, k2, w, np.zeros(3))
    _, hb0, _, g1 = nx.lstm_cell_backward(p, k1, hb, cb)
    for k in p:
        assert rel_err(g1[k] + g2[k], fd(loss, p[k])) < 1e-5
    assert rel_err(hb0, fd(loss, h0)) < 1e-5


def test_lstm_backward_rejects_foreign_cache(rng):
    p, q = nx.init_lstm(rng, 2, 3), nx.init_lstm(rng, 2, 3)
    _, _, cache = nx.lstm_cell_forward(p, np.ones(2), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        nx.lstm_cell_backward(q, cache, np.ones(3), np.ones(3))


def test_lstm_rejects_bad_dims(rng):
    p = nx.init_lstm(rng, 2, 3)
    with pytest.raises(ValueError):
        nx.lstm_cell_forward(p, np.ones(4), np.zeros(3), np.zeros(3))


def test_rnn_backward_finite_differences(rng):
    p = nx.init_rnn(rng, 3, 4)
    x, h = rng.normal(size=(2, 3)), rng.normal(size=(2, 4))
    w = rng.normal(size=(2, 4))
    loss = lambda: float(np.sum(w * nx.rnn_cell_forward(p, x, h)[0]))  # noqa: E731
    _, cache = nx.rnn_cell_forward(p, x, h)
    xg, hg, g = nx.rnn_cell_backward(p, cache, w)
    assert rel_err(xg, fd(loss, x)) < 1e-5
    assert rel_err(hg, fd(loss, h)) < 1e-5
    for k in p:
        assert rel_err(g[k], fd(loss, p[k])) < 1e-5


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = nx.AdamState()
    nx.adam_step(st_, p, {"w": np.zeros(2)}, 0.1)
    assert p["w"].tolist() == [1.0, -2.0]
    assert st_.step == 1


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    nx.adam_step(nx.AdamState(eps=0.0), p, {"w": np.array([3.0, -0.01, 1e5])}, 0.1)
    np.testing.assert_allclose(p["w"], [0.9, 1.1, 0.9], rtol=1e-12)


def test_adam_quadratic_matches_scalar_recursion():
    p = {"w": np.array([1.0])}
    st_ = nx.AdamState()
    m = v = 0.0
    w = 1.0
    ws = []
    for t in range(1, 101):
        nx.adam_step(st_, p, {"w": 2 * p["w"]}, 0.1)
        g = 2 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        ws.append(abs(p["w"][0]))
        assert p["w"][0] == pytest.approx(w, rel=1e-12, abs=1e-15)
    assert ws[-1] < 0.5
    first = ws[:8]
    assert all(a > b for a, b in zip(first, first[1:]))


def test_adam_rejects_non_finite_gradient():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError, match="'w'"):
        nx.adam_step(nx.AdamState(), p, {"w": np.array([np.nan, 0.0])}, 0.1)
    assert not np.any(p["w"])
