import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from odernn.odesolve import (DOPRI5, EULER, RK4, TABLEAUX, DivergenceError, SolverConfig,
                             convergence_order, euler_step, integrate, rk_step, rk_step_vjp)
from conftest import fd, rel_err


class Linear:
    """f(h) = A h with the parameter exposed for gradient tests."""

    def __init__(self, A):
        self.params = {"A": A}

    def __call__(self, h, t):
        return h @ self.params["A"].T

    def forward(self, h, t):
        return self(h, t), h

    def backward(self, h, g):
        return g @ self.params["A"], {"A": np.outer(g, h) if g.ndim == 1 else g.T @ h}


def decay(h, t):
    return -h


def rotation(h, t):
    return np.array([-h[1], h[0]])


@pytest.mark.parametrize("tab", [EULER, RK4, DOPRI5])
def test_tableau_consistency(tab):
    assert sum(tab.b) == pytest.approx(1.0, abs=1e-14)
    for i, row in enumerate(tab.a):
        assert sum(row) == pytest.approx(tab.c[i], abs=1e-14)
    if tab.b_err is not None:
        assert sum(tab.b_err) == pytest.approx(0.0, abs=1e-14)


def test_euler_step_examples():
    assert euler_step(lambda h, t: np.zeros_like(h), np.array([3.0]), 0.0, 0.1)[0] == 3.0
    assert euler_step(lambda h, t: h, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(1.1, abs=1e-15)
    assert euler_step(decay, np.array([1.0]), 0.0, 0.1)[0] == pytest.approx(0.9, abs=1e-15)


def test_euler_step_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        euler_step(decay, np.ones(1), 0.0, 0.0)


def test_euler_step_nonfinite_dynamics():
    with pytest.raises(FloatingPointError):
        euler_step(lambda h, t: h * np.inf, np.ones(1), 0.0, 0.1)


def test_rk4_single_step_matches_taylor():
    h, _, _ = rk_step(decay, np.array([1.0]), 0.0, 0.1, RK4)
    x = -0.1
    assert h[0] == pytest.approx(1 + x + x ** 2 / 2 + x ** 3 / 6 + x ** 4 / 24, abs=1e-16)


def test_adaptive_hits_exp_minus_one():
    h, traj = integrate(decay, np.array([1.0]), 0.0, 1.0, SolverConfig("rk45", rtol=1e-8, atol=1e-8))
    assert abs(h[0] - math.exp(-1)) < 1e-6
    assert traj.times[0] == 0.0 and traj.times[-1] == 1.0
    assert sum(traj.steps) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("method", ["euler", "rk4", "rk45"])
def test_zero_length_interval_returns_input(method):
    h0 = np.array([1.0, 2.0])
    h, traj = integrate(decay, h0, 0.3, 0.3, SolverConfig(method))
    assert h is h0
    assert traj.n_steps == 0


def test_circle_closes_after_one_period():
    h, _ = integrate(rotation, np.array([1.0, 0.0]), 0.0, 2 * math.pi,
                     SolverConfig("rk45", rtol=1e-8, atol=1e-10))
    assert np.linalg.norm(h - [1.0, 0.0]) < 1e-5


def test_convergence_orders():
    exact = lambda t: np.array([math.exp(-t)])  # noqa: E731
    p1, steps, errs = convergence_order(decay, exact, "euler", np.array([1.0]), base_step=0.01)
    assert abs(p1 - 1.0) <= 0.15
    assert len(steps) >= 4 and len(errs) == len(steps)
    p4, _, _ = convergence_order(decay, exact, "rk4", np.array([1.0]), base_step=0.2, halvings=4)
    assert abs(p4 - 4.0) <= 0.3


def test_convergence_order_uses_at_least_four_points():
    exact = lambda t: np.array([math.exp(-t)])  # noqa: E731
    _, steps, _ = convergence_order(decay, exact, "rk4", np.array([1.0]), halvings=1)
    assert len(steps) >= 4


def test_fixed_step_count_and_equal_steps():
    _, traj = integrate(decay, np.ones(1), 0.0, 1e-3, SolverConfig("rk4", step=2.5e-4))
    assert traj.n_steps == 4
    assert all(s == pytest.approx(2.5e-4) for s in traj.steps)


def test_fixed_step_budget_exceeded():
    with pytest.raises(DivergenceError):
        integrate(decay, np.ones(1), 0.0, 1.0, SolverConfig("euler", step=1e-3, max_steps=10))


def test_blowup_is_reported():
    with pytest.raises((FloatingPointError, DivergenceError)):
        with np.errstate(over="ignore", invalid="ignore"):
            integrate(lambda h, t: h ** 3, np.array([10.0]), 0.0, 1.0, SolverConfig("rk4", step=0.1))


def test_adaptive_stiff_budget():
    with pytest.raises(DivergenceError):
        integrate(lambda h, t: -1e6 * h, np.ones(1), 0.0, 1.0, SolverConfig("rk45", max_steps=50))


def test_reverse_interval_rejected():
    with pytest.raises(ValueError):
        integrate(decay, np.ones(1), 1.0, 0.0, SolverConfig())


@pytest.mark.parametrize("bad", [dict(method="rk2"), dict(step=0.0), dict(rtol=0.0), dict(max_steps=0)])
def test_solver_config_validation(bad):
    with pytest.raises(ValueError):
        SolverConfig(**bad)


def test_adaptive_step_count_grows_with_span():
    f = Linear(np.array([[0.0, -3.0], [3.0, -0.1]]))
    cfg = SolverConfig("rk45", rtol=1e-8, atol=1e-10)
    _, a = integrate(f, np.array([1.0, 0.0]), 0.0, 1.0, cfg)
    _, b = integrate(f, np.array([1.0, 0.0]), 0.0, 2.0, cfg)
    assert b.n_steps >= a.n_steps


@settings(max_examples=15, deadline=None)
@given(st.sampled_from(sorted(TABLEAUX)), st.integers(0, 2 ** 31), st.floats(0.01, 0.5))
def test_rk_step_vjp_matches_finite_differences(method, seed, dt):
    r = np.random.default_rng(seed)
    tab = TABLEAUX[method]
    f = Linear(r.normal(size=(3, 3)))
    h = r.normal(size=3)
    w = r.normal(size=3)
    loss = lambda: float(w @ rk_step(f, h, 0.0, dt, tab)[0])  # noqa: E731
    _, _, stages = rk_step(f, h, 0.0, dt, tab, keep_stages=True)
    hb, g = rk_step_vjp(f, stages, dt, tab, w)
    assert rel_err(hb, fd(loss, h)) < 1e-6
    assert rel_err(g["A"], fd(loss, f.params["A"])) < 1e-6


def test_rk4_on_linear_system_matches_expm():
    scipy_linalg = pytest.importorskip("scipy.linalg")
    A = np.array([[-0.5, 2.0], [-2.0, -0.5]])
    h, _ = integrate(Linear(A), np.array([1.0, 1.0]), 0.0, 1.0, SolverConfig("rk4", step=1e-3))
    np.testing.assert_allclose(h, scipy_linalg.expm(A) @ [1.0, 1.0], atol=1e-11)
