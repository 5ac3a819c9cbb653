"""Self-checks run by ``odernn diag`` and by the test suite.

Each check returns a list of :class:`CheckResult` rows; a row passes when its
measured value is within the stated bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .channel import (ArrayConfig, OfdmConfig, UserState, channel_at, csi_time_derivative,
                      random_scene)
from .odesolve import SolverConfig, convergence_order, integrate

__all__ = ["CheckResult", "CHECKS", "run_checks", "check_solver_order", "check_gradients",
           "check_derivative", "finite_difference", "derivative_errors"]


@dataclass
class CheckResult:
    check: str
    name: str
    value: float
    bound: str
    passed: bool

    def line(self) -> str:
        return f"{self.check}\t{self.name}\t{self.value:.3e}\t{self.bound}\t{'PASS' if self.passed else 'FAIL'}"


def _decay(h, t):
    return -h


def check_solver_order() -> list[CheckResult]:
    """Global orders on dx/dt = -x and the adaptive solver's value at t = 1."""
    out = []
    exact = lambda t: np.array([math.exp(-t)])  # noqa: E731
    p_euler, _, _ = convergence_order(_decay, exact, "euler", np.array([1.0]), base_step=0.01)
    out.append(CheckResult("solver-order", "euler", p_euler, "1.0+-0.15", abs(p_euler - 1.0) <= 0.15))
    p_rk4, _, _ = convergence_order(_decay, exact, "rk4", np.array([1.0]), base_step=0.2, halvings=4)
    out.append(CheckResult("solver-order", "rk4", p_rk4, "4.0+-0.3", abs(p_rk4 - 4.0) <= 0.3))
    h1, _ = integrate(_decay, np.array([1.0]), 0.0, 1.0, SolverConfig("rk45", rtol=1e-8, atol=1e-10))
    err = abs(float(h1[0]) - math.exp(-1.0))
    out.append(CheckResult("solver-order", "rk45 e^-1", err, "<1e-6", err < 1e-6))
    return out


def finite_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``fn`` with respect to array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    for ix in np.ndindex(x.shape):
        old = x[ix]
        x[ix] = old + eps
        fp = fn()
        x[ix] = old - eps
        fm = fn()
        x[ix] = old
        g[ix] = (fp - fm) / (2 * eps)
    return g


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _gradcheck_block(kind: str, rng: np.random.Generator) -> float:
    """Worst relative error between the hand-written VJP and central differences."""
    B = int(rng.integers(1, 4))
    n_in = int(rng.integers(1, 5))
    n_out = int(rng.integers(1, 5))
    x = rng.normal(size=(B, n_in))
    if kind == "linear":
        p = nx.init_linear(rng, n_in, n_out)
        w = rng.normal(size=(B, n_out))
        loss = lambda: float(np.sum(w * nx.linear_forward(p, x)))  # noqa: E731
        x_bar, grads = nx.linear_vjp(p, x, w)
    elif kind == "mlp":
        dims = [n_in] + [int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3)))] + [n_out]
        p = nx.init_mlp(rng, dims)
        w = rng.normal(size=(B, n_out))
        loss = lambda: float(np.sum(w * nx.mlp_forward(p, x)))  # noqa: E731
        x_bar, grads = nx.mlp_vjp(p, x, w)
    elif kind == "lstm":
        D = n_out
        p = nx.init_lstm(rng, n_in, D)
        h = rng.normal(size=(B, D))
        c = rng.normal(size=(B, D))
        wh, wc = rng.normal(size=(B, D)), rng.normal(size=(B, D))

        def loss():
            h1, c1, _ = nx.lstm_cell_forward(p, x, h, c)
            return float(np.sum(wh * h1) + np.sum(wc * c1))

        _, _, cache = nx.lstm_cell_forward(p, x, h, c)
        x_bar, h_bar, c_bar, grads = nx.lstm_cell_backward(p, cache, wh, wc)
        worst = max(_rel(h_bar, finite_difference(loss, h)), _rel(c_bar, finite_difference(loss, c)))
    else:
        raise ValueError(f"unknown block {kind!r}")
    errs = [_rel(x_bar, finite_difference(loss, x))]
    errs += [_rel(grads[k], finite_difference(loss, p[k])) for k in p]
    if kind == "lstm":
        errs.append(worst)
    return max(errs)


def check_gradients(draws: int = 20, seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    rng = nx.seeded_rng(seed)
    out = []
    for kind in ("linear", "mlp", "lstm"):
        worst = max(_gradcheck_block(kind, rng) for _ in range(draws))
        out.append(CheckResult("gradcheck", kind, worst, f"<{tol:g}", worst < tol))
    return out


def derivative_errors(n_scenes: int = 100, seed: int = 0, speed_range=(1.0, 40.0),
                    fd_step: float = 1e-7) -> np.ndarray:
    """Relative Frobenius error of the analytic dH/dt against central differences."""
    rng = nx.seeded_rng(seed)
    ofdm, array = OfdmConfig(n_c=16), ArrayConfig(n_t=8)
    errs = []
    for _ in range(n_scenes):
        scene = random_scene(rng, n_scatterers=int(rng.integers(1, 10)), los=bool(rng.integers(0, 2)))
        x0, x1, y0, y1 = scene.bounds
        pos = rng.uniform([x0, y0], [x1, y1])
        user = UserState((float(pos[0]), float(pos[1])), float(rng.uniform(*speed_range)),
                         float(rng.uniform(0, 2 * np.pi)))
        v = user.velocity
        fwd = UserState(tuple(pos + fd_step * v), user.speed, user.heading)
        bwd = UserState(tuple(pos - fd_step * v), user.speed, user.heading)
        fd = (channel_at(scene, fwd, array, ofdm) - channel_at(scene, bwd, array, ofdm)) / (2 * fd_step)
        an = csi_time_derivative(scene, user, array, ofdm)
        errs.append(np.linalg.norm(an - fd) / np.linalg.norm(fd))
    return np.array(errs)


def check_derivative(n_scenes: int = 100, seed: int = 0) -> list[CheckResult]:
    worst = float(np.max(derivative_errors(n_scenes, seed)))
    return [CheckResult("theorem1", f"dH/dt vs FD ({n_scenes} scenes)", worst, "<1e-3", worst < 1e-3)]


CHECKS = {
    "solver-order": check_solver_order,
    "gradcheck": check_gradients,
    "theorem1": check_derivative,
}


def run_checks(which: str = "all") -> list[CheckResult]:
    if which == "all":
        names = list(CHECKS)
    elif which in CHECKS:
        names = [which]
    else:
        raise ValueError(f"unknown check {which!r}; choose from {sorted(CHECKS) + ['all']}")
    rows = []
    for n in names:
        rows.extend(CHECKS[n]())
    return rows
