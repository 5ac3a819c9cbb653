"""CSI predictors: ODE-RNN, plain Neural ODE, LSTM and vanilla RNN.

All models see a CSI matrix through :func:`csi_splice` (real parts then
imaginary parts, antenna-major), divide it by a fixed ``csi_scale`` and map
it to a ``D``-dimensional hidden space with a linear encoder.  A linear
decoder maps the final hidden state back.

Forward passes work on batches: ``obs`` has shape ``(B, n, 2*N_t*N_c)`` and
``times`` shape ``(B, n+1)`` (the last column is the prediction time).  The
returned :class:`ForwardCache` feeds exactly one backward pass; how much of
the ODE solve it keeps depends on ``store``:

``"stages"``       every RK stage with its network cache (direct backprop)
``"checkpoints"``  the state at the start of each accepted step
``"boundaries"``   only the states at observation times (continuous adjoint)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .odesolve import SolverConfig, Trajectory, integrate

__all__ = [
    "csi_splice",
    "csi_unsplice",
    "MlpDynamics",
    "ForwardCache",
    "CsiPredictor",
    "OdeRnnModel",
    "NeuralOdeModel",
    "RecurrentBaseline",
    "build_model",
    "MODEL_NAMES",
    "save_checkpoint",
    "load_checkpoint",
]

MODEL_NAMES = ("ode-rnn", "neural-ode", "lstm", "rnn")
STORE_MODES = ("stages", "checkpoints", "boundaries")


def csi_splice(H: np.ndarray) -> np.ndarray:
    """``(..., N_t, N_c)`` complex -> ``(..., 2*N_t*N_c)`` real."""
    H = np.asarray(H)
    lead = H.shape[:-2]
    flat = H.reshape(lead + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1).astype(np.float64)


def csi_unsplice(v: np.ndarray, n_t: int, n_c: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    m = n_t * n_c
    if v.shape[-1] != 2 * m:
        raise ValueError(f"spliced vector has length {v.shape[-1]}, expected {2 * m}")
    lead = v.shape[:-1]
    return (v[..., :m] + 1j * v[..., m:]).reshape(lead + (n_t, n_c))


class MlpDynamics:
    """``dh/dt = rate * mlp(h)``; ``rate`` is a scalar or one value per batch row.

    The MLP works in model time; ``rate = 1 / time_scale`` converts to seconds.
    """

    def __init__(self, params: dict, rate):
        self.params = params
        self.rate = rate if np.isscalar(rate) else np.asarray(rate, dtype=np.float64)[:, None]

    def __call__(self, h, t):
        return self.rate * nx.mlp_forward(self.params, h)

    def forward(self, h, t):
        out, cache = nx.mlp_forward(self.params, h, return_cache=True)
        return self.rate * out, cache

    def backward(self, cache, cotangent):
        return nx.mlp_backward(self.params, cache, self.rate * cotangent)

    def vjp(self, h, t, cotangent):
        return nx.mlp_vjp(self.params, h, self.rate * cotangent)


@dataclass
class Segment:
    """One ODE solve: either on shared times or per-row gaps rescaled to [0, 1]."""

    t0: float
    t1: float
    rate: object
    cfg: SolverConfig
    h_start: np.ndarray
    h_end: np.ndarray
    trajectory: Trajectory | None


@dataclass
class ForwardCache:
    kind: str
    store: str
    solver: SolverConfig | None
    times: np.ndarray
    enc_in: list = field(default_factory=list)
    cell: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    dec_in: np.ndarray | None = None
    stored_floats: int = 0
    consumed: bool = False


def _accumulate(total: dict, grads: dict, prefix: str = ""):
    for k, v in grads.items():
        name = prefix + k
        if name in total:
            total[name] = total[name] + v
        else:
            total[name] = v


def _shared_gaps(times: np.ndarray) -> bool:
    gaps = np.diff(times, axis=1)
    return bool(np.all(gaps == gaps[:1]))


class CsiPredictor:
    kind = ""
    uses_time = False

    def __init__(self, n_t: int, n_c: int, hidden: int, params: dict, csi_scale: float = 1.0,
                 time_scale: float = 1e-3, dyn_hidden: tuple = ()):
        self.n_t = int(n_t)
        self.n_c = int(n_c)
        self.hidden = int(hidden)
        self.params = params
        self.csi_scale = float(csi_scale)
        self.time_scale = float(time_scale)
        self.dyn_hidden = tuple(int(d) for d in dyn_hidden)

    @property
    def n_features(self) -> int:
        return 2 * self.n_t * self.n_c

    def arch(self) -> dict:
        return {
            "kind": self.kind,
            "n_t": self.n_t,
            "n_c": self.n_c,
            "hidden": self.hidden,
            "dyn_hidden": list(self.dyn_hidden),
            "csi_scale": self.csi_scale,
            "time_scale": self.time_scale,
        }

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # -- shared pieces ----------------------------------------------------
    def _check_inputs(self, obs, times):
        obs = np.asarray(obs, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
        if obs.ndim != 3 or obs.shape[2] != self.n_features:
            raise ValueError(f"observations must be (B, n, {self.n_features}), got {obs.shape}")
        if times.shape != (obs.shape[0], obs.shape[1] + 1):
            raise ValueError(f"times must be (B, n+1) = {(obs.shape[0], obs.shape[1] + 1)}, got {times.shape}")
        if obs.shape[1] < 1:
            raise ValueError("at least one observation is required")
        if np.any(np.diff(times, axis=1) < 0):
            raise ValueError("timestamps must be nondecreasing")
        return obs, times

    def _encode(self, x, cache: ForwardCache):
        xin = x / self.csi_scale
        cache.enc_in.append(xin)
        return nx.linear_forward(nx.sub_params(self.params, "encoder"), xin)

    def _decode(self, h, cache: ForwardCache):
        cache.dec_in = h
        return nx.linear_forward(nx.sub_params(self.params, "decoder"), h) * self.csi_scale

    def _dynamics(self, rate) -> MlpDynamics:
        return MlpDynamics(nx.sub_params(self.params, "dynamics"), rate)

    def _evolve(self, h, t_from: np.ndarray, t_to: np.ndarray, solver: SolverConfig,
                cache: ForwardCache, shared: bool):
        """Integrate every row of ``h`` from ``t_from[b]`` to ``t_to[b]``."""
        if shared:
            t0, t1 = float(t_from[0]), float(t_to[0])
            rate = 1.0 / self.time_scale
            cfg = solver
        else:
            gaps = t_to - t_from
            span = float(gaps.max())
            t0, t1 = 0.0, (1.0 if span > 0 else 0.0)
            rate = gaps / self.time_scale
            cfg = SolverConfig(solver.method, solver.step / span if span > 0 else 1.0,
                               solver.rtol, solver.atol, solver.max_steps)
        f = self._dynamics(rate)
        keep = cache.store == "stages"
        h_end, traj = integrate(f, h, t0, t1, cfg, keep_stages=keep)
        if cache.store == "boundaries":
            stored = h.size * 2
            traj_kept = None
        elif cache.store == "checkpoints":
            stored = traj.n_steps * (h.size + 2)
            traj_kept = traj
        else:
            stored = traj.n_steps * (h.size + 2)
            for stages in traj.stages:
                for y, (inputs, _) in stages:
                    stored += y.size + sum(a.size for a in inputs)
            traj_kept = traj
        cache.stored_floats += stored
        cache.segments.append(Segment(t0, t1, rate, cfg, h, h_end, traj_kept))
        return h_end

    def _new_cache(self, times, solver, store) -> ForwardCache:
        if store not in STORE_MODES:
            raise ValueError(f"store must be one of {STORE_MODES}")
        return ForwardCache(self.kind, store, solver, times)

    # -- interface --------------------------------------------------------
    def forward(self, obs, times, solver: SolverConfig | None = None, store: str = "checkpoints"):
        raise NotImplementedError

    def backward(self, cache: ForwardCache, y_bar: np.ndarray, segment_vjp) -> dict:
        raise NotImplementedError

    def predict(self, seq, solver: SolverConfig | None = None) -> np.ndarray:
        """Predicted CSI matrix at the last timestamp of ``seq``."""
        obs = csi_splice(seq.observations)[None]
        times = np.asarray(seq.times, dtype=np.float64)[None]
        y, _ = self.forward(obs, times, solver, store="boundaries")
        return csi_unsplice(y[0], self.n_t, self.n_c)

    def _start_backward(self, cache: ForwardCache, y_bar):
        if cache.consumed:
            raise ValueError("forward cache already consumed by a backward pass")
        if cache.kind != self.kind:
            raise ValueError(f"cache from a {cache.kind!r} model passed to {self.kind!r}")
        cache.consumed = True
        grads = self.zero_grads()
        y_bar = np.asarray(y_bar, dtype=np.float64) * self.csi_scale
        h_bar, g = nx.linear_vjp(nx.sub_params(self.params, "decoder"), cache.dec_in, y_bar)
        _accumulate_into(grads, g, "decoder.")
        return grads, h_bar

    def _encoder_backward(self, grads, cache, i, x_bar):
        _, g = nx.linear_vjp(nx.sub_params(self.params, "encoder"), cache.enc_in[i], x_bar)
        _accumulate_into(grads, g, "encoder.")


def _accumulate_into(grads: dict, g: dict, prefix: str):
    for k, v in g.items():
        grads[prefix + k] += v


class OdeRnnModel(CsiPredictor):
    """LSTM updates at observations, learned ODE flow of ``h`` in between.

    The cell state ``c`` is carried unchanged across gaps.
    """

    kind = "ode-rnn"
    uses_time = True

    @classmethod
    def create(cls, rng, n_t, n_c, hidden=64, dyn_hidden=(96, 128, 96), **kw):
        F = 2 * n_t * n_c
        p = {}
        p.update(nx.prefixed("encoder", nx.init_linear(rng, F, hidden)))
        p.update(nx.prefixed("lstm", nx.init_lstm(rng, hidden, hidden)))
        p.update(nx.prefixed("dynamics", nx.init_mlp(rng, [hidden, *dyn_hidden, hidden])))
        p.update(nx.prefixed("decoder", nx.init_linear(rng, hidden, F)))
        return cls(n_t, n_c, hidden, p, dyn_hidden=dyn_hidden, **kw)

    def forward(self, obs, times, solver=None, store="checkpoints"):
        obs, times = self._check_inputs(obs, times)
        solver = solver or SolverConfig()
        cache = self._new_cache(times, solver, store)
        B, n, _ = obs.shape
        shared = _shared_gaps(times)
        h = np.zeros((B, self.hidden))
        c = np.zeros((B, self.hidden))
        lstm = nx.sub_params(self.params, "lstm")
        for i in range(n):
            if i > 0:
                h = self._evolve(h, times[:, i - 1], times[:, i], solver, cache, shared)
            x = self._encode(obs[:, i], cache)
            h, c, lc = nx.lstm_cell_forward(lstm, x, h, c)
            cache.cell.append(lc)
        h = self._evolve(h, times[:, n - 1], times[:, n], solver, cache, shared)
        return self._decode(h, cache), cache

    def backward(self, cache, y_bar, segment_vjp):
        grads, h_bar = self._start_backward(cache, y_bar)
        lstm = nx.sub_params(self.params, "lstm")
        n = len(cache.cell)
        f_grads: dict = {}
        h_bar, g = segment_vjp(self, cache.segments[n - 1], h_bar)
        _accumulate(f_grads, g)
        c_bar = np.zeros_like(h_bar)
        for i in reversed(range(n)):
            x_bar, h_bar, c_bar, g = nx.lstm_cell_backward(lstm, cache.cell[i], h_bar, c_bar)
            _accumulate_into(grads, g, "lstm.")
            self._encoder_backward(grads, cache, i, x_bar)
            if i > 0:
                h_bar, g = segment_vjp(self, cache.segments[i - 1], h_bar)
                _accumulate(f_grads, g)
        _accumulate_into(grads, f_grads, "dynamics.")
        return grads


class NeuralOdeModel(CsiPredictor):
    """Encode the first observation, integrate to the prediction time."""

    kind = "neural-ode"
    uses_time = True

    @classmethod
    def create(cls, rng, n_t, n_c, hidden=64, dyn_hidden=(96, 128, 96), **kw):
        F = 2 * n_t * n_c
        p = {}
        p.update(nx.prefixed("encoder", nx.init_linear(rng, F, hidden)))
        p.update(nx.prefixed("dynamics", nx.init_mlp(rng, [hidden, *dyn_hidden, hidden])))
        p.update(nx.prefixed("decoder", nx.init_linear(rng, hidden, F)))
        return cls(n_t, n_c, hidden, p, dyn_hidden=dyn_hidden, **kw)

    def forward(self, obs, times, solver=None, store="checkpoints"):
        obs, times = self._check_inputs(obs, times)
        solver = solver or SolverConfig()
        cache = self._new_cache(times, solver, store)
        shared = _shared_gaps(times[:, [0, -1]])
        h = self._encode(obs[:, 0], cache)
        h = self._evolve(h, times[:, 0], times[:, -1], solver, cache, shared)
        return self._decode(h, cache), cache

    def backward(self, cache, y_bar, segment_vjp):
        grads, h_bar = self._start_backward(cache, y_bar)
        h_bar, g = segment_vjp(self, cache.segments[0], h_bar)
        _accumulate_into(grads, g, "dynamics.")
        self._encoder_backward(grads, cache, 0, h_bar)
        return grads


class RecurrentBaseline(CsiPredictor):
    """Discrete LSTM or Elman RNN over the encoded observations; timestamps unused."""

    uses_time = False

    def __init__(self, *args, cell: str = "lstm", **kw):
        if cell not in ("lstm", "rnn"):
            raise ValueError("cell must be 'lstm' or 'rnn'")
        self.cell_type = cell
        super().__init__(*args, **kw)

    @property
    def kind(self):
        return self.cell_type

    @classmethod
    def create(cls, rng, n_t, n_c, hidden=64, cell="lstm", **kw):
        F = 2 * n_t * n_c
        p = {}
        p.update(nx.prefixed("encoder", nx.init_linear(rng, F, hidden)))
        if cell == "lstm":
            p.update(nx.prefixed("lstm", nx.init_lstm(rng, hidden, hidden)))
        else:
            p.update(nx.prefixed("rnn", nx.init_rnn(rng, hidden, hidden)))
        p.update(nx.prefixed("decoder", nx.init_linear(rng, hidden, F)))
        kw.pop("dyn_hidden", None)
        return cls(n_t, n_c, hidden, p, cell=cell, **kw)

    def forward(self, obs, times=None, solver=None, store="checkpoints"):
        obs = np.asarray(obs, dtype=np.float64)
        if times is None:
            times = np.tile(np.arange(obs.shape[1] + 1, dtype=np.float64), (obs.shape[0], 1))
        obs, times = self._check_inputs(obs, times)
        cache = self._new_cache(times, solver, store)
        B, n, _ = obs.shape
        h = np.zeros((B, self.hidden))
        c = np.zeros((B, self.hidden))
        cp = nx.sub_params(self.params, self.cell_type)
        for i in range(n):
            x = self._encode(obs[:, i], cache)
            if self.cell_type == "lstm":
                h, c, lc = nx.lstm_cell_forward(cp, x, h, c)
            else:
                h, lc = nx.rnn_cell_forward(cp, x, h)
            cache.cell.append(lc)
        return self._decode(h, cache), cache

    def backward(self, cache, y_bar, segment_vjp=None):
        grads, h_bar = self._start_backward(cache, y_bar)
        cp = nx.sub_params(self.params, self.cell_type)
        c_bar = np.zeros_like(h_bar)
        for i in reversed(range(len(cache.cell))):
            if self.cell_type == "lstm":
                x_bar, h_bar, c_bar, g = nx.lstm_cell_backward(cp, cache.cell[i], h_bar, c_bar)
            else:
                x_bar, h_bar, g = nx.rnn_cell_backward(cp, cache.cell[i], h_bar)
            _accumulate_into(grads, g, self.cell_type + ".")
            self._encoder_backward(grads, cache, i, x_bar)
        return grads


def build_model(name: str, n_t: int, n_c: int, seed: int = 0, hidden: int = 64,
                dyn_hidden=(96, 128, 96), csi_scale: float = 1.0,
                time_scale: float = 1e-3) -> CsiPredictor:
    """Fresh model with weights drawn from ``seed``."""
    rng = nx.seeded_rng(seed)
    kw = dict(hidden=hidden, csi_scale=csi_scale, time_scale=time_scale)
    if name == "ode-rnn":
        return OdeRnnModel.create(rng, n_t, n_c, dyn_hidden=tuple(dyn_hidden), **kw)
    if name == "neural-ode":
        return NeuralOdeModel.create(rng, n_t, n_c, dyn_hidden=tuple(dyn_hidden), **kw)
    if name in ("lstm", "rnn"):
        return RecurrentBaseline.create(rng, n_t, n_c, cell=name, **kw)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")


# ---------------------------------------------------------------------------
# checkpoint files
#
#   "ODRN" | u16 version | u32 header length | JSON header (utf-8)
#   then, per parameter in header order: f64 little-endian data (C order)

_CKPT_MAGIC = b"ODRN"
_CKPT_VERSION = 1


def save_checkpoint(model: CsiPredictor, path, extra: dict | None = None) -> None:
    names = sorted(model.params)
    header = {
        "arch": model.arch(),
        "params": [{"name": k, "shape": list(model.params[k].shape)} for k in names],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<HI", _CKPT_VERSION, len(hb)))
    buf.write(hb)
    for k in names:
        buf.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[CsiPredictor, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        off += 8 * count
    a = header["arch"]
    kw = dict(csi_scale=a["csi_scale"], time_scale=a["time_scale"], dyn_hidden=tuple(a["dyn_hidden"]))
    if a["kind"] == "ode-rnn":
        model = OdeRnnModel(a["n_t"], a["n_c"], a["hidden"], params, **kw)
    elif a["kind"] == "neural-ode":
        model = NeuralOdeModel(a["n_t"], a["n_c"], a["hidden"], params, **kw)
    else:
        model = RecurrentBaseline(a["n_t"], a["n_c"], a["hidden"], params, cell=a["kind"], **kw)
    return model, header.get("extra", {})
