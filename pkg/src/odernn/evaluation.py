"""NMSE metric, observation dropping and the experiment sweeps.

A sweep varies one quantity (user speed, sampling interval, sequence length
or observation noise level), trains every requested model for every grid
value and seed on a freshly generated dataset, and records the test NMSE.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import (ArrayConfig, CsiDataset, CsiSequence, GenConfig, NoisePolicy, OfdmConfig,
                      generate_dataset, random_scene)
from .models import MODEL_NAMES, CsiPredictor, build_model, csi_splice, csi_unsplice
from .numerics import seeded_rng
from .odesolve import SolverConfig
from .training import TrainConfig, fit_csi_scale, fit_time_scale, train

__all__ = [
    "nmse",
    "sample_nmse",
    "drop_bad_observations",
    "predict_sequences",
    "dataset_nmse",
    "SweepSpec",
    "SweepResult",
    "run_sweep",
    "run_velocity_sweep",
    "run_interval_sweep",
    "run_length_sweep",
    "run_noise_sweep",
]

log = logging.getLogger(__name__)

SWEEP_VARIABLES = ("velocity", "sampling_interval", "sequence_length", "channel_noise_nmse")


def sample_nmse(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-sample ``sum |y - y_hat|^2 / sum |y|^2`` over the trailing two axes."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    den = np.sum(np.abs(target) ** 2, axis=(-2, -1))
    if np.any(den == 0):
        raise ValueError("NMSE is undefined for an all-zero target")
    return np.sum(np.abs(target - pred) ** 2, axis=(-2, -1)) / den


def nmse(pred: np.ndarray, target: np.ndarray) -> float:
    """NMSE of one matrix pair, or the mean over a stack of them."""
    return float(np.mean(sample_nmse(pred, target)))


def drop_bad_observations(seq: CsiSequence, nmse_threshold: float) -> CsiSequence:
    """Remove observations annotated noisier than ``nmse_threshold``.

    Surviving timestamps are kept as they are.  If every observation exceeds
    the threshold, the least noisy one is kept.
    """
    keep = np.flatnonzero(seq.noise_nmse <= nmse_threshold)
    if len(keep) == len(seq.noise_nmse):
        return seq
    if len(keep) == 0:
        keep = np.array([int(np.argmin(seq.noise_nmse))])
    times = np.concatenate([seq.times[keep], seq.times[-1:]])
    return CsiSequence(times, seq.observations[keep], seq.target, seq.noise_nmse[keep])


def predict_sequences(model: CsiPredictor, seqs: list[CsiSequence],
                      solver: SolverConfig | None = None, batch: int = 256) -> np.ndarray:
    """Predicted CSI for each sequence; sequences of equal length are batched."""
    out = np.empty((len(seqs), model.n_t, model.n_c), dtype=np.complex128)
    by_len: dict = {}
    for i, s in enumerate(seqs):
        by_len.setdefault(s.n_obs, []).append(i)
    for n, idx in sorted(by_len.items()):
        for start in range(0, len(idx), batch):
            chunk = idx[start:start + batch]
            obs = csi_splice(np.stack([seqs[i].observations for i in chunk]))
            times = np.stack([seqs[i].times for i in chunk])
            y, _ = model.forward(obs, times, solver, store="boundaries")
            out[chunk] = csi_unsplice(y, model.n_t, model.n_c)
    return out


def dataset_nmse(model: CsiPredictor, dataset: CsiDataset, index=None,
                 solver: SolverConfig | None = None, drop_threshold: float | None = None) -> float:
    """Mean per-sample NMSE over ``index`` (default: the test split)."""
    idx = dataset.test_index if index is None else np.asarray(index)
    if dataset.dims != (model.n_t, model.n_c):
        raise ValueError(f"model expects {model.n_t}x{model.n_c} CSI, dataset holds "
                         f"{dataset.dims[0]}x{dataset.dims[1]}")
    seqs = [dataset[int(i)] for i in idx]
    if drop_threshold is not None and math.isfinite(drop_threshold):
        if not model.uses_time:
            raise ValueError(f"{model.kind} cannot consume irregular sequences; "
                             "observation dropping needs a continuous-time model")
        seqs = [drop_bad_observations(s, drop_threshold) for s in seqs]
    pred = predict_sequences(model, seqs, solver)
    return nmse(pred, np.stack([s.target for s in seqs]))


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class SweepSpec:
    variable: str
    grid: list
    models: list = field(default_factory=lambda: ["ode-rnn", "neural-ode", "lstm", "rnn"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_samples: int = 2000
    n_t: int = 8
    n_c: int = 16
    scene_seed: int = 0
    n_scatterers: int = 7
    bs: tuple = (60.0, -400.0)
    gen: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 64
    dyn_hidden: tuple = (96, 128, 96)
    steps_per_interval: int | None = 1
    drop_factor: float = 0.5
    obs_dropout: float = 0.2  # thinning while training continuous-time models for the noise sweep

    def __post_init__(self):
        if isinstance(self.gen, dict):
            self.gen = GenConfig.from_dict(self.gen)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        self.grid = list(self.grid)
        self.models = list(self.models)
        self.seeds = [int(s) for s in self.seeds]
        self.bs = tuple(self.bs)
        self.dyn_hidden = tuple(self.dyn_hidden)
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}; choose from {SWEEP_VARIABLES}")
        if not self.grid:
            raise ValueError("sweep grid is empty")
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ValueError(f"unknown model {m!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bs"] = list(self.bs)
        d["dyn_hidden"] = list(self.dyn_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sweep spec keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    # -- per-cell configuration ------------------------------------------
    def gen_for(self, value) -> GenConfig:
        g = self.gen
        if self.variable == "velocity":
            return replace(g, speed_range=(float(value), float(value)))
        if self.variable == "sampling_interval":
            return replace(g, interval=float(value))
        if self.variable == "sequence_length":
            return replace(g, n_obs=int(value))
        return replace(g, noise=replace(g.noise, level=float(value)))

    def solver_for(self, gen: GenConfig) -> SolverConfig:
        s = self.train.solver
        if self.steps_per_interval:
            s = replace(s, step=gen.interval / self.steps_per_interval)
        return s

    def scene(self):
        scene = random_scene(seeded_rng(self.scene_seed), n_scatterers=self.n_scatterers, bs=self.bs)
        return scene, OfdmConfig(n_c=self.n_c), ArrayConfig(n_t=self.n_t)

    def data_seed(self, seed: int, grid_index: int) -> int:
        return 1_000_003 * int(seed) + int(grid_index)


@dataclass
class SweepResult:
    spec: SweepSpec
    records: list

    def aggregates(self) -> list:
        """Median, min and max NMSE over seeds per (model, value)."""
        groups: dict = {}
        for r in self.records:
            groups.setdefault((r["model"], r["value"]), []).append(r["nmse"])
        out = []
        for (model, value), vals in groups.items():
            v = np.asarray(vals, dtype=np.float64)
            ok = v[np.isfinite(v)]
            out.append({
                "model": model,
                "value": value,
                "median": float(np.median(ok)) if len(ok) else float("nan"),
                "min": float(ok.min()) if len(ok) else float("nan"),
                "max": float(ok.max()) if len(ok) else float("nan"),
                "n": int(len(ok)),
            })
        return sorted(out, key=lambda a: (a["model"], a["value"]))

    def median(self, model: str, value) -> float:
        for a in self.aggregates():
            if a["model"] == model and a["value"] == value:
                return a["median"]
        raise KeyError((model, value))

    @property
    def failed(self) -> list:
        return [r for r in self.records if r.get("status", "ok") != "ok"]

    def write(self, out_dir) -> tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        stem = os.path.join(out_dir, f"sweep_{self.spec.variable}_{self.spec.digest()}")
        with open(stem + ".csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sweep_var", "value", "model", "seed", "nmse", "train_ms"])
            for r in self.records:
                w.writerow([r["sweep_var"], r["value"], r["model"], r["seed"], repr(r["nmse"]), r["train_ms"]])
        with open(stem + ".json", "w") as fh:
            json.dump({"spec": self.spec.to_dict(), "records": self.records,
                       "aggregates": self.aggregates()}, fh, indent=2, sort_keys=True)
        return stem + ".csv", stem + ".json"


def _record(spec, value, model, seed, nmse_val, train_ms, status="ok"):
    return {"sweep_var": spec.variable, "value": value, "model": model, "seed": int(seed),
            "nmse": float(nmse_val), "train_ms": round(float(train_ms), 1), "status": status}


def _train_one(spec: SweepSpec, name: str, seed: int, ds: CsiDataset, solver: SolverConfig,
               obs_dropout: float = 0.0):
    n_t, n_c = ds.dims
    model = build_model(name, n_t, n_c, seed=seed, hidden=spec.hidden, dyn_hidden=spec.dyn_hidden,
                        csi_scale=fit_csi_scale(ds), time_scale=fit_time_scale(ds))
    cfg = replace(spec.train, solver=solver, seed=seed,
                  obs_dropout=obs_dropout if model.uses_time else 0.0)
    t0 = time.perf_counter()
    train(model, ds, cfg)
    return model, (time.perf_counter() - t0) * 1e3


def _run_cell(spec: SweepSpec, gi: int, seed: int) -> list:
    """Train and evaluate every model for one grid value and seed."""
    value = spec.grid[gi]
    gen = spec.gen_for(value)
    solver = spec.solver_for(gen)
    scene, ofdm, array = spec.scene()
    ds = generate_dataset(scene, ofdm, array, gen, spec.n_samples, spec.data_seed(seed, gi))
    records = []
    for name in spec.models:
        try:
            model, ms = _train_one(spec, name, seed, ds, solver)
            records.append(_record(spec, value, name, seed, dataset_nmse(model, ds, solver=solver), ms))
        except Exception as exc:  # recorded, sweep continues
            log.warning("cell %s=%s %s seed %d failed: %s", spec.variable, value, name, seed, exc)
            records.append(_record(spec, value, name, seed, float("nan"), 0.0, f"failed: {exc}"))
    return records


def _run_noise_cell(spec: SweepSpec, seed: int) -> list:
    """Train once on clean data, then evaluate on noisy test observations at
    every grid level.  Continuous-time models are trained on randomly thinned
    sequences and, at test time, drop observations whose annotated noise
    exceeds ``drop_factor * level``."""
    clean_gen = replace(spec.gen, noise=replace(spec.gen.noise, level=0.0))
    solver = spec.solver_for(clean_gen)
    scene, ofdm, array = spec.scene()
    data_seed = spec.data_seed(seed, 0)
    ds = generate_dataset(scene, ofdm, array, clean_gen, spec.n_samples, data_seed)
    noisy = {}
    for value in spec.grid:
        gen = spec.gen_for(value)
        noisy[value] = ds if float(value) == 0 else generate_dataset(
            scene, ofdm, array, gen, spec.n_samples, data_seed)
    records = []
    for name in spec.models:
        try:
            model, ms = _train_one(spec, name, seed, ds, solver, spec.obs_dropout)
        except Exception as exc:
            for value in spec.grid:
                records.append(_record(spec, value, name, seed, float("nan"), 0.0, f"failed: {exc}"))
            continue
        for value in spec.grid:
            thr = spec.drop_factor * float(value) if (model.uses_time and float(value) > 0) else None
            try:
                val = dataset_nmse(model, noisy[value], solver=solver, drop_threshold=thr)
                records.append(_record(spec, value, name, seed, val, ms))
            except Exception as exc:
                records.append(_record(spec, value, name, seed, float("nan"), ms, f"failed: {exc}"))
    return records


def _cell_job(args):
    spec_dict, kind, gi, seed = args
    spec = SweepSpec.from_dict(spec_dict)
    if kind == "noise":
        return _run_noise_cell(spec, seed)
    return _run_cell(spec, gi, seed)


def run_sweep(spec: SweepSpec, jobs: int = 1, out_dir=None) -> SweepResult:
    """Run every (grid value, seed) cell.

    With ``out_dir`` set, each finished cell is saved under
    ``out_dir/cells_<digest>/`` and skipped on a rerun with the same spec.
    """
    if spec.variable == "channel_noise_nmse":
        cells = [("noise", 0, s) for s in spec.seeds]
    else:
        cells = [("grid", gi, s) for gi in range(len(spec.grid)) for s in spec.seeds]
    cell_dir = None
    done: dict = {}
    if out_dir is not None:
        cell_dir = os.path.join(out_dir, f"cells_{spec.digest()}")
        os.makedirs(cell_dir, exist_ok=True)
        for kind, gi, s in cells:
            p = os.path.join(cell_dir, f"{kind}_{gi}_{s}.json")
            if os.path.exists(p):
                with open(p) as fh:
                    done[(kind, gi, s)] = json.load(fh)
    todo = [c for c in cells if c not in done]
    args = [(spec.to_dict(), *c) for c in todo]

    def finish(cell, recs):
        done[cell] = recs
        if cell_dir is not None:
            with open(os.path.join(cell_dir, f"{cell[0]}_{cell[1]}_{cell[2]}.json"), "w") as fh:
                json.dump(recs, fh)

    if jobs > 1 and len(args) > 1:
        from multiprocessing import get_context
        with get_context("spawn").Pool(min(jobs, len(args))) as pool:
            for cell, recs in zip(todo, pool.imap(_cell_job, args)):
                finish(cell, recs)
    else:
        for cell, a in zip(todo, args):
            finish(cell, _cell_job(a))
    records = [r for c in cells for r in done[c]]
    records.sort(key=lambda r: (spec.grid.index(r["value"]), spec.models.index(r["model"]), r["seed"]))
    return SweepResult(spec, records)


def run_velocity_sweep(spec: SweepSpec, **kw) -> SweepResult:
    if spec.variable != "velocity":
        raise ValueError("velocity sweep needs variable='velocity'")
    return run_sweep(spec, **kw)


def run_interval_sweep(spec: SweepSpec, **kw) -> SweepResult:
    """Only continuous-time models take part; the discrete baselines stop
    converging at long sampling intervals."""
    if spec.variable != "sampling_interval":
        raise ValueError("interval sweep needs variable='sampling_interval'")
    bad = [m for m in spec.models if m not in ("ode-rnn", "neural-ode")]
    if bad:
        raise ValueError(f"interval sweep compares ode-rnn and neural-ode only, got {bad}")
    return run_sweep(spec, **kw)


def run_length_sweep(spec: SweepSpec, **kw) -> SweepResult:
    """Neural ODE is excluded: its prediction depends only on the first observation."""
    if spec.variable != "sequence_length":
        raise ValueError("length sweep needs variable='sequence_length'")
    if "neural-ode" in spec.models:
        raise ValueError("neural-ode takes no part in the sequence-length sweep")
    return run_sweep(spec, **kw)


def run_noise_sweep(spec: SweepSpec, **kw) -> SweepResult:
    if spec.variable != "channel_noise_nmse":
        raise ValueError("noise sweep needs variable='channel_noise_nmse'")
    return run_sweep(spec, **kw)
