"""Explicit Runge-Kutta integration with recorded trajectories.

Three methods share one code path through Butcher tableaux: forward Euler,
classical RK4 (both fixed-step) and the Dormand-Prince 5(4) embedded pair
with PI step-size control.  Each accepted step is recorded so that a caller
can either keep every stage (for direct reverse-mode differentiation) or
only the step start points (and recompute the stages later).

A dynamics object is any callable ``f(h, t)``.  Differentiating through a
step additionally needs ``f.forward(h, t) -> (value, cache)`` and
``f.backward(cache, cotangent) -> (h_grad, param_grads)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Tableau",
    "EULER",
    "RK4",
    "DOPRI5",
    "TABLEAUX",
    "SolverConfig",
    "Trajectory",
    "DivergenceError",
    "euler_step",
    "rk_step",
    "rk_step_vjp",
    "integrate",
    "convergence_order",
]

MIN_STEP = 1e-12


class DivergenceError(RuntimeError):
    """The integrator could not reach the end of the interval."""


@dataclass(frozen=True)
class Tableau:
    name: str
    a: tuple
    b: tuple
    c: tuple
    b_err: tuple | None = None  # b - b_hat, for the embedded error estimate
    order: int = 1

    @property
    def stages(self) -> int:
        return len(self.b)


EULER = Tableau("euler", a=((),), b=(1.0,), c=(0.0,), order=1)

RK4 = Tableau(
    "rk4",
    a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
    b=(1 / 6, 1 / 3, 1 / 3, 1 / 6),
    c=(0.0, 0.5, 0.5, 1.0),
    order=4,
)

_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_BHAT = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)

DOPRI5 = Tableau(
    "rk45",
    a=(
        (),
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
    ),
    b=_DP_B,
    c=(0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    b_err=tuple(x - y for x, y in zip(_DP_B, _DP_BHAT)),
    order=5,
)

TABLEAUX = {"euler": EULER, "rk4": RK4, "rk45": DOPRI5}


@dataclass(frozen=True)
class SolverConfig:
    """Integration settings.

    ``step`` (seconds) is used by the fixed-step methods; ``rtol``/``atol`` by
    the adaptive one.
    """

    method: str = "rk4"
    step: float = 5e-4
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in TABLEAUX:
            raise ValueError(f"unknown solver method {self.method!r}; choose from {sorted(TABLEAUX)}")
        if not self.step > 0:
            raise ValueError("solver step must be > 0")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be > 0")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @property
    def adaptive(self) -> bool:
        return self.method == "rk45"

    @property
    def tableau(self) -> Tableau:
        return TABLEAUX[self.method]


@dataclass
class Trajectory:
    """Visited ``(time, state)`` points; ``states[k]`` is the start of step ``k``.

    ``stages[k]`` holds the per-stage ``(input, cache)`` pairs when the
    integration was run with ``keep_stages=True``.
    """

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    stages: list | None = None
    rejected: int = 0
    method: str = ""

    @property
    def n_steps(self) -> int:
        return len(self.steps)


def _check_finite(h: np.ndarray, t: float):
    if not np.all(np.isfinite(h)):
        raise FloatingPointError(f"non-finite state during integration at t={t:.6g}")


def euler_step(f: Callable, h: np.ndarray, t: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("Euler step length must be > 0")
    k = f(h, t)
    if not np.all(np.isfinite(k)):
        raise FloatingPointError(f"non-finite dynamics value at t={t:.6g}")
    return h + dt * k


def rk_step(f, h, t, dt, tab: Tableau, keep_stages: bool = False):
    """One explicit RK step.

    Returns ``(h_new, err, stages)``; ``err`` is the embedded error vector
    (``None`` for tableaux without one) and ``stages`` a list of
    ``(y_i, cache_i)`` if ``keep_stages`` else ``None``.
    """
    ks = []
    stages = [] if keep_stages else None
    for i in range(tab.stages):
        y = h
        for j, aij in enumerate(tab.a[i]):
            if aij != 0.0:
                y = y + (dt * aij) * ks[j]
        ti = t + tab.c[i] * dt
        if keep_stages:
            k, cache = f.forward(y, ti)
            stages.append((y, cache))
        else:
            k = f(y, ti)
        ks.append(k)
    h_new = h
    for bi, k in zip(tab.b, ks):
        if bi != 0.0:
            h_new = h_new + (dt * bi) * k
    err = None
    if tab.b_err is not None:
        err = sum((dt * e) * k for e, k in zip(tab.b_err, ks) if e != 0.0)
    return h_new, err, stages


def rk_step_vjp(f, stages, dt: float, tab: Tableau, h_new_grad: np.ndarray):
    """Reverse pass of one :func:`rk_step` given its kept stages.

    Returns ``(h_grad, param_grads)`` where ``param_grads`` is summed over
    stages.
    """
    s = tab.stages
    k_bar = [None] * s
    for i in range(s):
        if tab.b[i] != 0.0:
            k_bar[i] = (dt * tab.b[i]) * h_new_grad
    h_bar = h_new_grad
    param_grads: dict = {}
    for i in reversed(range(s)):
        if k_bar[i] is None:
            continue
        _, cache = stages[i]
        y_bar, g = f.backward(cache, k_bar[i])
        for name, val in g.items():
            if name in param_grads:
                param_grads[name] = param_grads[name] + val
            else:
                param_grads[name] = val
        h_bar = h_bar + y_bar
        for j, aij in enumerate(tab.a[i]):
            if aij != 0.0:
                contrib = (dt * aij) * y_bar
                k_bar[j] = contrib if k_bar[j] is None else k_bar[j] + contrib
    return h_bar, param_grads


def _error_norm(err, h, h_new, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(h), np.abs(h_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, h0, t0, span, order, rtol, atol) -> float:
    scale = atol + rtol * np.abs(h0)
    d0 = np.sqrt(np.mean((h0 / scale) ** 2))
    f0 = f(h0, t0)
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    if d0 < 1e-5 or d1 < 1e-5:
        h = 1e-6 * span
    else:
        h = 0.01 * d0 / d1
    # one Euler probe to estimate the second derivative
    h1 = h0 + h * f0
    f1 = f(h1, t0 + h)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h
    if max(d1, d2) <= 1e-15:
        h_alt = max(1e-6 * span, h * 1e-3)
    else:
        h_alt = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return float(min(100 * h, h_alt, span))


def integrate(f, h0, t0: float, t1: float, cfg: SolverConfig, keep_stages: bool = False):
    """Integrate ``dh/dt = f(h, t)`` from ``t0`` to ``t1``.

    Returns ``(h1, trajectory)``.  ``t1 == t0`` gives back ``h0`` itself with
    a two-point trajectory and no steps.
    """
    h0 = np.asarray(h0, dtype=np.float64)
    t0 = float(t0)
    t1 = float(t1)
    if t1 < t0:
        raise ValueError(f"integrate requires t1 >= t0 (got {t0} -> {t1})")
    traj = Trajectory(method=cfg.method, stages=[] if keep_stages else None)
    if t1 == t0:
        traj.times = [t0, t1]
        traj.states = [h0, h0]
        return h0, traj
    tab = cfg.tableau
    span = t1 - t0

    if not cfg.adaptive:
        n = max(1, math.ceil(span / cfg.step - 1e-9))
        if n > cfg.max_steps:
            raise DivergenceError(f"{n} fixed steps needed, max_steps={cfg.max_steps}")
        dt = span / n
        h = h0
        for k in range(n):
            t = t0 + k * dt
            traj.times.append(t)
            traj.states.append(h)
            traj.steps.append(dt)
            h, _, stages = rk_step(f, h, t, dt, tab, keep_stages)
            _check_finite(h, t + dt)
            if keep_stages:
                traj.stages.append(stages)
        traj.times.append(t1)
        traj.states.append(h)
        return h, traj

    # Dormand-Prince with a PI controller
    safety, fac_min, fac_max = 0.9, 0.2, 10.0
    alpha, beta = 0.7 / 5.0, 0.4 / 5.0
    h = h0
    t = t0
    dt = _initial_step(f, h0, t0, span, tab.order - 1, cfg.rtol, cfg.atol)
    err_prev = 1.0
    n_acc = 0
    while t < t1:
        if n_acc + traj.rejected >= cfg.max_steps:
            raise DivergenceError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        last = t + dt >= t1 or (t1 - (t + dt)) < 1e-12 * max(1.0, abs(t1))
        step = t1 - t if last else dt
        h_new, err_vec, stages = rk_step(f, h, t, step, tab, keep_stages)
        err = _error_norm(err_vec, h, h_new, cfg.rtol, cfg.atol)
        if not np.isfinite(err):
            err = np.inf
        if err <= 1.0:
            traj.times.append(t)
            traj.states.append(h)
            traj.steps.append(step)
            traj.errors.append(err)
            if keep_stages:
                traj.stages.append(stages)
            n_acc += 1
            t = t1 if last else t + step
            h = h_new
            _check_finite(h, t)
            fac = safety * max(err, 1e-10) ** -alpha * err_prev ** beta
            dt = step * min(fac_max, max(fac_min, fac))
            err_prev = max(err, 1e-4)
        else:
            traj.rejected += 1
            fac = safety * err ** -alpha if np.isfinite(err) else fac_min
            dt = step * min(1.0, max(fac_min, fac))
        if dt < MIN_STEP:
            raise DivergenceError(f"step size fell below {MIN_STEP:g} at t={t:.6g}")
    traj.times.append(t1)
    traj.states.append(h)
    return h, traj


def convergence_order(f, exact_solution: Callable, method: str, h0, t0: float = 0.0,
                      t1: float = 1.0, base_step: float = 0.1, halvings: int = 5):
    """Empirical global order: slope of log(error) vs log(step).

    Returns ``(order, steps, errors)``; at least four points are used.
    """
    halvings = max(halvings, 3)
    steps, errs = [], []
    exact = np.asarray(exact_solution(t1), dtype=np.float64)
    for k in range(halvings + 1):
        dt = base_step / 2 ** k
        cfg = SolverConfig(method=method, step=dt, max_steps=10 ** 7)
        h1, _ = integrate(f, h0, t0, t1, cfg)
        steps.append(dt)
        errs.append(float(np.max(np.abs(h1 - exact))))
    slope = np.polyfit(np.log(steps), np.log(errs), 1)[0]
    return float(slope), steps, errs
