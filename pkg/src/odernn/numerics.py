"""Dense building blocks with hand-written gradients.

Every block works on a single vector ``x`` of shape ``(n,)`` or on a batch of
row vectors of shape ``(B, n)``.  Parameter gradients are always summed over
the batch axis.

Parameters are plain ``dict[str, np.ndarray]`` so that larger models can
compose them under dotted prefixes and the optimizer can treat every block
the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "seeded_rng",
    "child_rng",
    "init_linear",
    "linear_forward",
    "linear_vjp",
    "init_mlp",
    "mlp_dims",
    "mlp_forward",
    "mlp_backward",
    "mlp_vjp",
    "init_lstm",
    "lstm_cell_forward",
    "lstm_cell_backward",
    "init_rnn",
    "rnn_cell_forward",
    "rnn_cell_backward",
    "sigmoid",
    "AdamState",
    "adam_step",
    "prefixed",
    "sub_params",
]


# ---------------------------------------------------------------------------
# randomness

def seeded_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator.

    PCG64 streams and the ziggurat normal transform used by
    ``Generator.standard_normal`` are fixed by numpy's stream-compatibility
    policy, so a seed reproduces the same draws on every platform.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator derived from ``seed`` and integer ``keys``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# helpers

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected a vector or a batch of vectors, got shape {x.shape}")
    return x, False


def prefixed(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def sub_params(params: dict, prefix: str) -> dict:
    """View of the entries of ``params`` under ``prefix`` with the prefix stripped."""
    head = prefix + "."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# linear layer

def init_linear(rng: np.random.Generator, n_in: int, n_out: int) -> dict:
    s = 1.0 / np.sqrt(n_in)
    return {
        "weight": rng.uniform(-s, s, size=(n_out, n_in)),
        "bias": rng.uniform(-s, s, size=n_out),
    }


def linear_forward(params: dict, x: np.ndarray) -> np.ndarray:
    W, b = params["weight"], params["bias"]
    if np.shape(x)[-1] != W.shape[1]:
        raise ValueError(f"linear layer expects input dim {W.shape[1]}, got {np.shape(x)[-1]}")
    return np.asarray(x, dtype=np.float64) @ W.T + b


def linear_vjp(params: dict, x: np.ndarray, cotangent: np.ndarray) -> tuple[np.ndarray, dict]:
    W = params["weight"]
    xb, single = _as_batch(x)
    gb, _ = _as_batch(cotangent)
    if gb.shape[1] != W.shape[0] or xb.shape[1] != W.shape[1]:
        raise ValueError("linear_vjp: shape mismatch")
    x_grad = gb @ W
    grads = {"weight": gb.T @ xb, "bias": gb.sum(axis=0)}
    return (x_grad[0] if single else x_grad), grads


# ---------------------------------------------------------------------------
# tanh MLP

def init_mlp(rng: np.random.Generator, dims: list[int] | tuple[int, ...]) -> dict:
    """Layers ``dims[0] -> ... -> dims[-1]``; tanh on hidden layers, identity out."""
    if len(dims) < 2:
        raise ValueError("an MLP needs at least input and output dims")
    params = {}
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        layer = init_linear(rng, n_in, n_out)
        params[f"w{i}"] = layer["weight"]
        params[f"b{i}"] = layer["bias"]
    return params


def mlp_dims(params: dict) -> list[int]:
    n_layers = sum(1 for k in params if k.startswith("w"))
    dims = [params["w0"].shape[1]]
    for i in range(n_layers):
        dims.append(params[f"w{i}"].shape[0])
    return dims


def mlp_forward(params: dict, x: np.ndarray, return_cache: bool = False):
    n_layers = sum(1 for k in params if k.startswith("w"))
    xb, single = _as_batch(x)
    if xb.shape[1] != params["w0"].shape[1]:
        raise ValueError(f"MLP expects input dim {params['w0'].shape[1]}, got {xb.shape[1]}")
    inputs = []
    a = xb
    for i in range(n_layers):
        inputs.append(a)
        z = a @ params[f"w{i}"].T + params[f"b{i}"]
        a = np.tanh(z) if i < n_layers - 1 else z
    out = a[0] if single else a
    if return_cache:
        return out, (inputs, single)
    return out


def mlp_backward(params: dict, cache, cotangent: np.ndarray) -> tuple[np.ndarray, dict]:
    """Reverse pass of :func:`mlp_forward` given its cache.

    The hidden activations are recovered from the cached layer inputs
    (the input of layer ``i+1`` is ``tanh`` of layer ``i``'s pre-activation).
    """
    inputs, single = cache
    n_layers = len(inputs)
    g, _ = _as_batch(cotangent)
    if g.shape[1] != params[f"w{n_layers - 1}"].shape[0]:
        raise ValueError("MLP cotangent has the wrong length")
    grads = {}
    for i in reversed(range(n_layers)):
        a_in = inputs[i]
        grads[f"w{i}"] = g.T @ a_in
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params[f"w{i}"]
        if i > 0:
            g = g * (1.0 - a_in * a_in)
    return (g[0] if single else g), grads


def mlp_vjp(params: dict, x: np.ndarray, cotangent: np.ndarray) -> tuple[np.ndarray, dict]:
    out, cache = mlp_forward(params, x, return_cache=True)
    if np.shape(cotangent) != np.shape(out):
        raise ValueError(f"cotangent shape {np.shape(cotangent)} != output shape {np.shape(out)}")
    return mlp_backward(params, cache, cotangent)


# ---------------------------------------------------------------------------
# LSTM cell
#
# Gates are stacked row-wise in the order input, forget, output, candidate:
#   W: (4D, n_in + D) acting on [x; h],  b: (4D,)

@dataclass
class LstmCache:
    params_id: int
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray
    single: bool


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, forget_bias: float = 1.0) -> dict:
    s = 1.0 / np.sqrt(n_in + hidden)
    W = rng.uniform(-s, s, size=(4 * hidden, n_in + hidden))
    b = rng.uniform(-s, s, size=4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return {"W": W, "b": b}


def lstm_gate_views(params: dict) -> dict:
    """Per-gate ``(D, n_in + D)`` weight views and ``(D,)`` biases."""
    D = params["W"].shape[0] // 4
    names = ("input", "forget", "output", "candidate")
    return {
        n: (params["W"][k * D:(k + 1) * D], params["b"][k * D:(k + 1) * D])
        for k, n in enumerate(names)
    }


def lstm_cell_forward(params: dict, x: np.ndarray, h: np.ndarray, c: np.ndarray):
    W, b = params["W"], params["b"]
    D = W.shape[0] // 4
    xb, single = _as_batch(x)
    hb, _ = _as_batch(h)
    cb, _ = _as_batch(c)
    if hb.shape[1] != D or cb.shape[1] != D or xb.shape[1] + D != W.shape[1]:
        raise ValueError(
            f"LSTM cell dims: W {W.shape}, x {xb.shape}, h {hb.shape}, c {cb.shape}"
        )
    xh = np.concatenate([xb, hb], axis=1)
    z = xh @ W.T + b
    i = sigmoid(z[:, :D])
    f = sigmoid(z[:, D:2 * D])
    o = sigmoid(z[:, 2 * D:3 * D])
    g = np.tanh(z[:, 3 * D:])
    c_new = f * cb + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    cache = LstmCache(id(W), xh, cb, i, f, o, g, tanh_c, single)
    if single:
        return h_new[0], c_new[0], cache
    return h_new, c_new, cache


def lstm_cell_backward(params: dict, cache: LstmCache, h_grad: np.ndarray, c_grad: np.ndarray):
    """Gradients of ``<h_grad, h_new> + <c_grad, c_new>``.

    Returns ``(x_grad, h_prev_grad, c_prev_grad, param_grads)``.
    """
    W = params["W"]
    D = W.shape[0] // 4
    if not isinstance(cache, LstmCache) or cache.params_id != id(W) or cache.xh.shape[1] != W.shape[1]:
        raise ValueError("LSTM cache does not belong to these parameters")
    dh, _ = _as_batch(h_grad)
    dc, _ = _as_batch(c_grad)
    if dh.shape != cache.i.shape or dc.shape != cache.i.shape:
        raise ValueError("LSTM cotangent shape does not match the cached forward pass")
    do = dh * cache.tanh_c
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    di = dc * cache.g
    dg = dc * cache.i
    df = dc * cache.c_prev
    dc_prev = dc * cache.f
    dz = np.concatenate([
        di * cache.i * (1.0 - cache.i),
        df * cache.f * (1.0 - cache.f),
        do * cache.o * (1.0 - cache.o),
        dg * (1.0 - cache.g ** 2),
    ], axis=1)
    grads = {"W": dz.T @ cache.xh, "b": dz.sum(axis=0)}
    dxh = dz @ W
    n_in = W.shape[1] - D
    dx, dh_prev = dxh[:, :n_in], dxh[:, n_in:]
    if cache.single:
        return dx[0], dh_prev[0], dc_prev[0], grads
    return dx, dh_prev, dc_prev, grads


# ---------------------------------------------------------------------------
# vanilla (Elman) RNN cell: h' = tanh(W [x; h] + b)

@dataclass
class RnnCache:
    params_id: int
    xh: np.ndarray
    h_new: np.ndarray
    single: bool


def init_rnn(rng: np.random.Generator, n_in: int, hidden: int) -> dict:
    layer = init_linear(rng, n_in + hidden, hidden)
    return {"W": layer["weight"], "b": layer["bias"]}


def rnn_cell_forward(params: dict, x: np.ndarray, h: np.ndarray):
    W, b = params["W"], params["b"]
    xb, single = _as_batch(x)
    hb, _ = _as_batch(h)
    if xb.shape[1] + hb.shape[1] != W.shape[1] or hb.shape[1] != W.shape[0]:
        raise ValueError(f"RNN cell dims: W {W.shape}, x {xb.shape}, h {hb.shape}")
    xh = np.concatenate([xb, hb], axis=1)
    h_new = np.tanh(xh @ W.T + b)
    cache = RnnCache(id(W), xh, h_new, single)
    return (h_new[0] if single else h_new), cache


def rnn_cell_backward(params: dict, cache: RnnCache, h_grad: np.ndarray):
    W = params["W"]
    if not isinstance(cache, RnnCache) or cache.params_id != id(W):
        raise ValueError("RNN cache does not belong to these parameters")
    dh, _ = _as_batch(h_grad)
    dz = dh * (1.0 - cache.h_new ** 2)
    grads = {"W": dz.T @ cache.xh, "b": dz.sum(axis=0)}
    dxh = dz @ W
    n_in = W.shape[1] - W.shape[0]
    dx, dh_prev = dxh[:, :n_in], dxh[:, n_in:]
    if cache.single:
        return dx[0], dh_prev[0], grads
    return dx, dh_prev, grads


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {name!r} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
