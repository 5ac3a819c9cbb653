"""Loss, gradient engines and the minibatch training loop.

Three engines differentiate through the ODE segments of a forward pass:

``direct``
    reverse-mode through every stored RK stage (fixed-step solvers only).
``checkpoint-adjoint``
    keeps only the start state of each accepted step and, on the way back,
    recomputes that step's stages and differentiates them exactly.  The
    result is the gradient of the realized discrete trajectory, also for the
    adaptive solver.
``adjoint``
    integrates the augmented system (state, adjoint, parameter accumulator)
    backward in time with the same solver settings.  Only observation-time
    states are kept.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .channel import CsiDataset
from .models import CsiPredictor, ForwardCache, Segment, csi_splice
from .numerics import AdamState, adam_step, child_rng, seeded_rng
from .odesolve import DivergenceError, SolverConfig, integrate, rk_step, rk_step_vjp

__all__ = [
    "mse_loss",
    "GradBundle",
    "adjoint_segment",
    "direct_gradients",
    "adjoint_gradients",
    "checkpoint_adjoint_gradients",
    "ENGINES",
    "loss_and_gradients",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "train",
    "fit_csi_scale",
    "fit_time_scale",
    "thinned_batch_gradients",
]

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, samples, msg: str = "non-finite loss"):
        super().__init__(f"{msg} at step {step} (samples {list(samples)})")
        self.step = step
        self.samples = list(samples)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over spliced real outputs and its gradient.

    Complex ``(N_t, N_c)`` inputs are spliced first; the returned cotangent is
    then in spliced layout.  For a batch ``(B, F)`` the loss is the batch mean
    of per-sample MSE.
    """
    if np.iscomplexobj(pred) or np.iscomplexobj(target):
        pred, target = csi_splice(pred), csi_splice(target)
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


@dataclass
class GradBundle:
    grads: dict
    loss: float = float("nan")


# ---------------------------------------------------------------------------
# per-segment vector-Jacobian products

def _accumulate(total: dict, g: dict):
    for k, v in g.items():
        total[k] = total[k] + v if k in total else v


def _segment_vjp_direct(model: CsiPredictor, seg: Segment, h_bar):
    if seg.t1 == seg.t0:
        return h_bar, {}
    if seg.cfg.adaptive:
        raise ValueError("direct gradients need a fixed-step forward pass (euler or rk4)")
    traj = seg.trajectory
    if traj is None or traj.stages is None:
        raise ValueError("forward cache holds no RK stages; run forward with store='stages'")
    f = model._dynamics(seg.rate)
    tab = seg.cfg.tableau
    total: dict = {}
    for k in reversed(range(traj.n_steps)):
        h_bar, g = rk_step_vjp(f, traj.stages[k], traj.steps[k], tab, h_bar)
        _accumulate(total, g)
    return h_bar, total


def _segment_vjp_checkpoint(model: CsiPredictor, seg: Segment, h_bar):
    if seg.t1 == seg.t0:
        return h_bar, {}
    traj = seg.trajectory
    if traj is None:
        raise ValueError("forward cache holds no step checkpoints; run forward with store='checkpoints'")
    f = model._dynamics(seg.rate)
    tab = seg.cfg.tableau
    total: dict = {}
    for k in reversed(range(traj.n_steps)):
        _, _, stages = rk_step(f, traj.states[k], traj.times[k], traj.steps[k], tab, keep_stages=True)
        h_bar, g = rk_step_vjp(f, stages, traj.steps[k], tab, h_bar)
        _accumulate(total, g)
    return h_bar, total


def adjoint_segment(f, h_end: np.ndarray, a_end: np.ndarray, t0: float, t1: float,
                    cfg: SolverConfig, param_shapes: dict):
    """Continuous adjoint over ``[t0, t1]``.

    Integrates, in reversed time ``s = -t``,

        dh/ds = -f(h),   da/ds = a^T df/dh,   dg/ds = a^T df/dtheta

    from ``(h_end, a_end, 0)`` at ``s = -t1`` to ``s = -t0``.  Returns
    ``(a_start, param_grads, h_start)``.
    """
    h_end = np.asarray(h_end, dtype=np.float64)
    shape = h_end.shape
    nh = h_end.size
    names = list(param_shapes)
    sizes = [int(np.prod(param_shapes[k])) for k in names]

    def aug(z, s):
        h = z[:nh].reshape(shape)
        a = z[nh:2 * nh].reshape(shape)
        fh, cache = f.forward(h, -s)
        a_h, a_th = f.backward(cache, a)
        parts = [-fh.ravel(), a_h.ravel()]
        parts.extend(np.ravel(a_th[k]) for k in names)
        return np.concatenate(parts)

    z0 = np.concatenate([h_end.ravel(), np.asarray(a_end, dtype=np.float64).ravel(), np.zeros(sum(sizes))])
    z1, _ = integrate(aug, z0, -t1, -t0, cfg)
    h_start = z1[:nh].reshape(shape)
    a_start = z1[nh:2 * nh].reshape(shape)
    grads = {}
    off = 2 * nh
    for k, n in zip(names, sizes):
        grads[k] = z1[off:off + n].reshape(param_shapes[k])
        off += n
    return a_start, grads, h_start


def _segment_vjp_adjoint(model: CsiPredictor, seg: Segment, h_bar):
    if seg.t1 == seg.t0:
        return h_bar, {}
    f = model._dynamics(seg.rate)
    shapes = {k: v.shape for k, v in f.params.items()}
    try:
        a0, grads, _ = adjoint_segment(f, seg.h_end, h_bar, seg.t0, seg.t1, seg.cfg, shapes)
    except (DivergenceError, FloatingPointError) as exc:
        raise FloatingPointError(
            f"adjoint integration failed on segment [{seg.t0:.6g}, {seg.t1:.6g}]: {exc}") from exc
    return a0, grads


_SEGMENT_VJP = {
    "direct": ("stages", _segment_vjp_direct),
    "checkpoint-adjoint": ("checkpoints", _segment_vjp_checkpoint),
    "adjoint": ("boundaries", _segment_vjp_adjoint),
}

ENGINES = tuple(_SEGMENT_VJP)


def engine_store(engine: str) -> str:
    """Forward-cache mode an engine consumes."""
    try:
        return _SEGMENT_VJP[engine][0]
    except KeyError:
        raise ValueError(f"unknown gradient engine {engine!r}; choose from {ENGINES}") from None


def _run_engine(engine: str, model: CsiPredictor, cache: ForwardCache, y_bar) -> dict:
    store, seg_vjp = _SEGMENT_VJP[engine]
    if model.uses_time and cache.store != store:
        raise ValueError(f"{engine} gradients need a forward cache stored as {store!r}, got {cache.store!r}")
    return model.backward(cache, y_bar, seg_vjp)


def direct_gradients(model, cache, y_bar) -> dict:
    return _run_engine("direct", model, cache, y_bar)


def checkpoint_adjoint_gradients(model, cache, y_bar) -> dict:
    return _run_engine("checkpoint-adjoint", model, cache, y_bar)


def adjoint_gradients(model, cache, y_bar) -> dict:
    return _run_engine("adjoint", model, cache, y_bar)


def loss_and_gradients(model: CsiPredictor, obs, times, targets, solver: SolverConfig,
                       engine: str = "direct") -> GradBundle:
    """Batch-mean MSE (in units of ``csi_scale``) and its parameter gradients."""
    pred, cache = model.forward(obs, times, solver, store=engine_store(engine))
    s = model.csi_scale
    loss, cot = mse_loss(pred / s, np.asarray(targets) / s)
    grads = _run_engine(engine, model, cache, cot / s)
    return GradBundle(grads, loss)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 20
    lr: float = 1e-3
    engine: str = "direct"
    solver: SolverConfig = field(default_factory=lambda: SolverConfig("rk4", step=5e-4))
    seed: int = 0
    eval_every: int = 500
    clip: float | None = None
    obs_dropout: float = 0.0  # per-observation drop probability (time-aware models only)

    def __post_init__(self):
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and eval_every >= 1 are required")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.obs_dropout < 1.0:
            raise ValueError("obs_dropout must lie in [0, 1)")
        engine_store(self.engine)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: CsiPredictor
    losses: list
    history: list
    wall_ms: float


def fit_csi_scale(dataset: CsiDataset, index=None) -> float:
    """RMS of the spliced observation entries over ``index`` (default: train split)."""
    idx = dataset.train_index if index is None else np.asarray(index)
    obs = dataset.observations[idx]
    return float(np.sqrt(np.mean(np.abs(obs) ** 2) / 2))


def fit_time_scale(dataset: CsiDataset, index=None) -> float:
    """Median gap between consecutive timestamps over ``index`` (default: train split)."""
    idx = dataset.train_index if index is None else np.asarray(index)
    return float(np.median(np.diff(dataset.times[idx], axis=1)))


def thinned_batch_gradients(model: CsiPredictor, obs, times, targets, solver: SolverConfig,
                            engine: str, rng: np.random.Generator, p_drop: float) -> GradBundle:
    """Loss and gradients after dropping each observation with probability
    ``p_drop`` (at least one is kept per row).

    Rows with the same number of survivors are run together; the result is
    the batch mean, as for a full batch.
    """
    B, n = obs.shape[:2]
    keep = rng.random((B, n)) >= p_drop
    empty = ~keep.any(axis=1)
    keep[empty, rng.integers(0, n, size=int(empty.sum()))] = True
    counts = keep.sum(axis=1)
    total: dict = {}
    loss = 0.0
    for k in np.unique(counts):
        rows = np.flatnonzero(counts == k)
        sel = keep[rows]
        o = np.stack([obs[r][m] for r, m in zip(rows, sel)])
        t = np.stack([np.concatenate([times[r, :n][m], times[r, -1:]]) for r, m in zip(rows, sel)])
        part = loss_and_gradients(model, o, t, targets[rows], solver, engine)
        w = len(rows) / B
        loss += w * part.loss
        for name, g in part.grads.items():
            total[name] = total[name] + w * g if name in total else w * g
    return GradBundle(total, loss)


def _clip(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train(model: CsiPredictor, dataset: CsiDataset, cfg: TrainConfig, log_path=None,
          evaluate=None) -> TrainResult:
    """Adam on minibatches drawn from the train split.

    ``evaluate(model) -> float`` is called every ``eval_every`` steps and at
    the end; its value lands in the history as ``test_nmse``.  With
    ``cfg.obs_dropout > 0`` continuous-time models train on randomly thinned,
    irregularly spaced sequences.
    """
    train_idx = dataset.train_index
    if len(train_idx) == 0:
        raise ValueError("dataset has an empty train split")
    obs = csi_splice(dataset.observations)
    targets = csi_splice(dataset.targets)
    times = dataset.times
    rng = seeded_rng(cfg.seed)
    thin_rng = child_rng(cfg.seed, 0xD409) if cfg.obs_dropout > 0 and model.uses_time else None
    state = AdamState()
    bs = min(cfg.batch_size, len(train_idx))
    losses, history = [], []
    t_start = time.perf_counter()
    interval_losses = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            idx = np.sort(rng.choice(train_idx, size=bs, replace=False))
            try:
                if thin_rng is not None:
                    bundle = thinned_batch_gradients(model, obs[idx], times[idx], targets[idx], cfg.solver,
                                                     cfg.engine, thin_rng, cfg.obs_dropout)
                else:
                    bundle = loss_and_gradients(model, obs[idx], times[idx], targets[idx], cfg.solver,
                                                cfg.engine)
            except (FloatingPointError, DivergenceError) as exc:
                raise TrainingDiverged(step, idx, str(exc)) from exc
            if not np.isfinite(bundle.loss):
                raise TrainingDiverged(step, idx)
            grads = _clip(bundle.grads, cfg.clip) if cfg.clip else bundle.grads
            try:
                adam_step(state, model.params, grads, cfg.lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, idx, str(exc)) from exc
            losses.append(bundle.loss)
            interval_losses.append(bundle.loss)
            if step % cfg.eval_every == 0 or step == cfg.steps:
                rec = {
                    "step": step,
                    "train_mse": float(np.mean(interval_losses)),
                    "test_nmse": float(evaluate(model)) if evaluate else None,
                    "wall_ms": round((time.perf_counter() - t_start) * 1e3, 3),
                }
                interval_losses = []
                history.append(rec)
                log.info("step %d train_mse %.4g test_nmse %s", step, rec["train_mse"], rec["test_nmse"])
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
    finally:
        if fh:
            fh.close()
    return TrainResult(model, losses, history, (time.perf_counter() - t_start) * 1e3)
