"""Geometric multipath MIMO-OFDM channel simulator.

A 2-D scene holds a base station with a uniform linear array, a set of
point scatterers and an optional line-of-sight path.  Each scatterer gives
one single-bounce path.  For a user at ``x_u`` moving with speed ``v`` and
heading ``theta_v`` the response on subcarrier ``l`` is

    h[l] = sum_p alpha_p e(theta_p) exp(-j 2 pi (d_p + v cos(theta_v - theta_p) tau_p) / lambda_l)

with ``alpha_p = xi_p / d_p`` and ``tau_p = d_p / c``; the CSI matrix stacks
``h[1..N_c]`` as columns.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .numerics import child_rng, seeded_rng

__all__ = [
    "SPEED_OF_LIGHT",
    "InvalidSceneError",
    "ArrayConfig",
    "OfdmConfig",
    "Scene",
    "UserState",
    "Path",
    "CsiSequence",
    "CsiDataset",
    "GenConfig",
    "NoisePolicy",
    "array_response",
    "random_scene",
    "paths_from_geometry",
    "cfr_subcarrier",
    "csi_matrix",
    "channel_at",
    "propagate_user",
    "csi_time_derivative",
    "add_noise",
    "generate_sequence",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

SPEED_OF_LIGHT = 299_792_458.0


class InvalidSceneError(ValueError):
    """Scene geometry that cannot produce a valid path set."""


# ---------------------------------------------------------------------------
# configuration types

@dataclass(frozen=True)
class OfdmConfig:
    n_c: int = 16
    f_center: float = 3.5e9
    bandwidth: float = 100e6

    def __post_init__(self):
        if self.n_c < 1:
            raise ValueError("n_c must be >= 1")
        if np.any(self.frequencies() <= 0):
            raise ValueError("all subcarrier frequencies must be positive")

    def frequencies(self) -> np.ndarray:
        if self.n_c == 1:
            return np.array([self.f_center])
        lo = self.f_center - self.bandwidth / 2
        return lo + np.arange(self.n_c) * self.bandwidth / (self.n_c - 1)

    def wavelengths(self) -> np.ndarray:
        return SPEED_OF_LIGHT / self.frequencies()

    @property
    def center_wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.f_center


@dataclass(frozen=True)
class ArrayConfig:
    """BS uniform linear array.  ``spacing=None`` means half the center wavelength."""

    n_t: int = 8
    spacing: float | None = None
    orientation: float = 0.0

    def __post_init__(self):
        if self.n_t < 1:
            raise ValueError("n_t must be >= 1")
        if self.spacing is not None and not self.spacing > 0:
            raise ValueError("antenna spacing must be > 0")

    def resolved_spacing(self, ofdm: OfdmConfig) -> float:
        return self.spacing if self.spacing is not None else ofdm.center_wavelength / 2


@dataclass
class Scene:
    bs: np.ndarray
    scatterers: np.ndarray  # (S, 2)
    xi: np.ndarray  # (S,)
    los: bool = True
    bounds: tuple = (0.0, 120.0, 0.0, 60.0)  # xmin, xmax, ymin, ymax

    def __post_init__(self):
        self.bs = np.asarray(self.bs, dtype=np.float64).reshape(2)
        self.scatterers = np.asarray(self.scatterers, dtype=np.float64).reshape(-1, 2)
        self.xi = np.asarray(self.xi, dtype=np.float64).reshape(-1)
        if len(self.xi) != len(self.scatterers):
            raise InvalidSceneError("one reflection coefficient per scatterer is required")
        if np.any(self.xi <= 0):
            raise InvalidSceneError("reflection coefficients must be positive")
        if len(self.scatterers) + int(self.los) > 25:
            raise InvalidSceneError("at most 25 propagation paths are supported")

    @property
    def n_paths(self) -> int:
        return len(self.scatterers) + int(self.los)

    def contains(self, pos) -> bool:
        x0, x1, y0, y1 = self.bounds
        return bool(x0 <= pos[0] <= x1 and y0 <= pos[1] <= y1)

    def to_dict(self) -> dict:
        return {
            "bs": self.bs.tolist(),
            "scatterers": self.scatterers.tolist(),
            "xi": self.xi.tolist(),
            "los": self.los,
            "bounds": list(self.bounds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(np.array(d["bs"]), np.array(d["scatterers"]).reshape(-1, 2),
                   np.array(d["xi"]), bool(d["los"]), tuple(d["bounds"]))


def random_scene(rng: np.random.Generator, n_scatterers: int = 7, los: bool = True,
                 bounds=(0.0, 120.0, 0.0, 60.0), bs=(60.0, -40.0),
                 margin: float = 5.0, extent: float = 40.0) -> Scene:
    """Scatterers uniform in the box around the user area (grown by ``extent``),
    kept at least ``margin`` meters from the user area and from the BS.
    ``xi`` is log-uniform on [0.05, 1]."""
    x0, x1, y0, y1 = bounds
    bs = np.asarray(bs, dtype=np.float64)
    pts = []
    while len(pts) < n_scatterers:
        p = rng.uniform([x0 - extent, y0 - extent], [x1 + extent, y1 + extent])
        inside = (x0 - margin <= p[0] <= x1 + margin) and (y0 - margin <= p[1] <= y1 + margin)
        if inside or np.hypot(*(p - bs)) < margin:
            continue
        pts.append(p)
    xi = np.exp(rng.uniform(np.log(0.05), np.log(1.0), size=n_scatterers))
    return Scene(bs, np.array(pts).reshape(-1, 2), xi, los, tuple(bounds))


@dataclass(frozen=True)
class UserState:
    position: tuple
    speed: float
    heading: float

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([np.cos(self.heading), np.sin(self.heading)])


@dataclass
class Path:
    index: int
    alpha: float
    theta: float
    length: float
    delay: float
    rho: np.ndarray
    xi: float
    kind: str  # "los" or "bounce"
    scatterer: int = -1


# ---------------------------------------------------------------------------
# channel model

def array_response(theta: float, cfg: ArrayConfig, wavelength: float,
                   spacing: float | None = None) -> np.ndarray:
    """ULA steering vector; entry k is ``exp(-j 2 pi k d cos(theta) / lambda)``."""
    if not wavelength > 0:
        raise ValueError("wavelength must be > 0")
    d = cfg.spacing if spacing is None else spacing
    if d is None:
        raise ValueError("array spacing unresolved; pass spacing or set ArrayConfig.spacing")
    k = np.arange(cfg.n_t)
    return np.exp(-2j * np.pi * k * d * np.cos(theta) / wavelength)


def _rho(theta, user: UserState, wavelengths, orientation):
    heading = user.heading - orientation
    return 2 * np.pi * (1.0 + user.speed * np.cos(heading - theta) / SPEED_OF_LIGHT) / wavelengths


def paths_from_geometry(scene: Scene, user: UserState, array: ArrayConfig | None = None,
                        ofdm: OfdmConfig | None = None) -> list[Path]:
    """Per-path parameters for a user, sorted by delay.

    Angles are measured from the array axis (``array.orientation``).
    """
    array = array or ArrayConfig()
    ofdm = ofdm or OfdmConfig()
    lam = ofdm.wavelengths()
    xu = np.asarray(user.position, dtype=np.float64)
    paths = []
    if scene.los:
        u = xu - scene.bs
        d = float(np.hypot(*u))
        if d <= 0:
            raise InvalidSceneError("user coincides with the base station")
        theta = float(np.arctan2(u[1], u[0]) - array.orientation)
        paths.append(("los", theta, d, 1.0, -1))
    for idx, (s, xi) in enumerate(zip(scene.scatterers, scene.xi)):
        leg1 = float(np.hypot(*(s - scene.bs)))
        leg2 = float(np.hypot(*(s - xu)))
        if leg1 <= 0 or leg2 <= 0:
            raise InvalidSceneError(f"scatterer at {s.tolist()} coincides with the BS or the user")
        theta = float(np.arctan2(s[1] - scene.bs[1], s[0] - scene.bs[0]) - array.orientation)
        paths.append(("bounce", theta, leg1 + leg2, float(xi), idx))
    paths.sort(key=lambda p: p[2])
    return [
        Path(i, xi / d, theta, d, d / SPEED_OF_LIGHT,
             _rho(theta, user, lam, array.orientation), xi, kind, src)
        for i, (kind, theta, d, xi, src) in enumerate(paths)
    ]


def cfr_subcarrier(paths: list[Path], user: UserState, l: int, array: ArrayConfig,
                   ofdm: OfdmConfig) -> np.ndarray:
    """Response across the array on subcarrier ``l`` (1-based)."""
    if not 1 <= l <= ofdm.n_c:
        raise ValueError(f"subcarrier index {l} outside [1, {ofdm.n_c}]")
    lam = ofdm.wavelengths()[l - 1]
    d_ant = array.resolved_spacing(ofdm)
    heading = user.heading - array.orientation
    h = np.zeros(array.n_t, dtype=np.complex128)
    for p in paths:
        phase = 2 * np.pi * (p.length + user.speed * np.cos(heading - p.theta) * p.delay) / lam
        h += p.alpha * array_response(p.theta, array, lam, d_ant) * np.exp(-1j * phase)
    return h


def csi_matrix(paths: list[Path], user: UserState, array: ArrayConfig,
               ofdm: OfdmConfig) -> np.ndarray:
    """``N_t x N_c`` complex CSI matrix (vectorized over paths and subcarriers)."""
    H = np.zeros((array.n_t, ofdm.n_c), dtype=np.complex128)
    if not paths:
        return H
    lam = ofdm.wavelengths()
    d_ant = array.resolved_spacing(ofdm)
    k = np.arange(array.n_t)[:, None]
    heading = user.heading - array.orientation
    for p in paths:
        steer = np.exp(-2j * np.pi * k * d_ant * np.cos(p.theta) / lam[None, :])
        phase = 2 * np.pi * (p.length + user.speed * np.cos(heading - p.theta) * p.delay) / lam
        H += p.alpha * steer * np.exp(-1j * phase)[None, :]
    return H


def channel_at(scene: Scene, user: UserState, array: ArrayConfig, ofdm: OfdmConfig) -> np.ndarray:
    return csi_matrix(paths_from_geometry(scene, user, array, ofdm), user, array, ofdm)


def propagate_user(user: UserState, dt: float, scene: Scene | None = None) -> tuple[UserState, bool]:
    """Uniform linear motion over ``dt``.  Returns ``(state, inside)`` where
    ``inside`` is False when ``scene`` is given and the user left its bounds."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if dt == 0:
        return user, True if scene is None else scene.contains(user.position)
    pos = np.asarray(user.position, dtype=np.float64) + dt * user.velocity
    new = replace(user, position=(float(pos[0]), float(pos[1])))
    inside = True if scene is None else scene.contains(pos)
    return new, inside


def csi_time_derivative(scene: Scene, user: UserState, array: ArrayConfig,
                        ofdm: OfdmConfig) -> np.ndarray:
    """Analytic dH/dt for a user in uniform motion through a static scene.

    Each path contributes ``H_p = (xi_p / d_p) e(theta_p) exp(-j rho_p d_p)``.
    Path lengths change with the user position, which gives
    ``dH_p/dt = (-1/d_p - j rho_p) H_p * dd_p/dt``.  Bounce-path angles are
    fixed by the scatterer, but the line-of-sight angle turns as the user
    moves, adding a term through the steering vector and through the
    ``cos(theta_v - theta_p)`` factor inside ``rho_p``.
    """
    lam = ofdm.wavelengths()[None, :]
    d_ant = array.resolved_spacing(ofdm)
    k = np.arange(array.n_t)[:, None]
    xu = np.asarray(user.position, dtype=np.float64)
    vel = user.velocity
    heading = user.heading - array.orientation
    dH = np.zeros((array.n_t, ofdm.n_c), dtype=np.complex128)
    for p in paths_from_geometry(scene, user, array, ofdm):
        steer = np.exp(-2j * np.pi * k * d_ant * np.cos(p.theta) / lam)
        rho = p.rho[None, :]
        Hp = p.alpha * steer * np.exp(-1j * rho * p.length)
        if p.kind == "los":
            u = xu - scene.bs
            dd = float(u @ vel) / p.length
            dtheta = float(u[0] * vel[1] - u[1] * vel[0]) / p.length ** 2
            drho_dtheta = 2 * np.pi * user.speed * np.sin(heading - p.theta) / (SPEED_OF_LIGHT * lam)
            dlog_dtheta = 2j * np.pi * k * d_ant * np.sin(p.theta) / lam - 1j * p.length * drho_dtheta
        else:
            s = scene.scatterers[p.scatterer]
            r = s - xu
            dd = -float(r @ vel) / float(np.hypot(*r))
            dtheta = 0.0
            dlog_dtheta = 0.0
        dH += Hp * ((-1.0 / p.length - 1j * rho) * dd + dlog_dtheta * dtheta)
    return dH


def add_noise(H: np.ndarray, target_nmse: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise with E[|N|^2] = target_nmse * |H|^2."""
    if target_nmse < 0:
        raise ValueError("target_nmse must be >= 0")
    if target_nmse == 0:
        return H.copy()
    energy = float(np.sum(np.abs(H) ** 2))
    if energy == 0:
        raise ValueError("cannot scale noise to a relative level on an all-zero channel")
    sigma2 = target_nmse * energy / H.size
    noise = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    return H + np.sqrt(sigma2 / 2) * noise


# ---------------------------------------------------------------------------
# sequences and datasets

@dataclass
class CsiSequence:
    times: np.ndarray  # (n+1,)
    observations: np.ndarray  # (n, N_t, N_c) complex
    target: np.ndarray  # (N_t, N_c) complex
    noise_nmse: np.ndarray  # (n,)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.observations = np.asarray(self.observations, dtype=np.complex128)
        self.target = np.asarray(self.target, dtype=np.complex128)
        self.noise_nmse = np.asarray(self.noise_nmse, dtype=np.float64)
        n = len(self.observations)
        if n < 1:
            raise ValueError("a sequence needs at least one observation")
        if self.times.shape != (n + 1,) or self.noise_nmse.shape != (n,):
            raise ValueError("times must have n+1 entries and noise annotations n entries")
        if self.observations.shape[1:] != self.target.shape:
            raise ValueError("observations and target must share dims")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("timestamps must be increasing")

    @property
    def n_obs(self) -> int:
        return len(self.observations)


@dataclass(frozen=True)
class NoisePolicy:
    """Observation noise.  ``elevated_fraction`` of the observations get
    ``level``; the others get ``level * base_ratio``."""

    level: float = 0.0
    elevated_fraction: float = 0.2
    base_ratio: float = 0.1


@dataclass(frozen=True)
class GenConfig:
    n_obs: int = 5
    interval: float = 1e-3
    jitter: float = 0.0  # gaps drawn from interval * U[1 - jitter, 1 + jitter]
    speed_range: tuple = (5.0, 5.0)
    noise: NoisePolicy = field(default_factory=NoisePolicy)
    max_retries: int = 1000

    def __post_init__(self):
        if self.n_obs < 1:
            raise ValueError("n_obs must be >= 1")
        if not self.interval > 0:
            raise ValueError("interval must be > 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must lie in [0, 1)")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ValueError("speed_range must satisfy 0 <= lo <= hi")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoisePolicy(**d["noise"])
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        return cls(**d)


def generate_sequence(scene: Scene, ofdm: OfdmConfig, array: ArrayConfig, gen: GenConfig,
                      rng: np.random.Generator) -> tuple[CsiSequence, UserState]:
    """One observed trajectory plus its clean target.  Returns the sequence and
    the initial user state."""
    n = gen.n_obs
    x0, x1, y0, y1 = scene.bounds
    for _ in range(gen.max_retries):
        pos = rng.uniform([x0, y0], [x1, y1])
        heading = rng.uniform(0.0, 2 * np.pi)
        lo, hi = gen.speed_range
        speed = rng.uniform(lo, hi) if hi > lo else lo
        if gen.jitter > 0:
            gaps = gen.interval * rng.uniform(1 - gen.jitter, 1 + gen.jitter, size=n)
        else:
            gaps = np.full(n, gen.interval)
        times = np.concatenate([[0.0], np.cumsum(gaps)])
        user0 = UserState((float(pos[0]), float(pos[1])), float(speed), float(heading))
        users = []
        ok = True
        for t in times:
            u, inside = propagate_user(user0, float(t), scene)
            if not inside:
                ok = False
                break
            users.append(u)
        if ok:
            break
    else:
        raise RuntimeError(f"no trajectory stayed inside the scene after {gen.max_retries} tries")

    clean = np.stack([channel_at(scene, u, array, ofdm) for u in users])
    obs = clean[:n].copy()
    noise_nmse = np.zeros(n)
    if gen.noise.level > 0:
        n_high = min(n, int(round(gen.noise.elevated_fraction * n)))
        if gen.noise.elevated_fraction > 0:
            n_high = max(n_high, 1)
        high = set(rng.choice(n, size=n_high, replace=False).tolist()) if n_high else set()
        for i in range(n):
            level = gen.noise.level if i in high else gen.noise.level * gen.noise.base_ratio
            obs[i] = add_noise(clean[i], level, rng)
            noise_nmse[i] = np.sum(np.abs(obs[i] - clean[i]) ** 2) / np.sum(np.abs(clean[i]) ** 2)
    return CsiSequence(times, obs, clean[n], noise_nmse), user0


@dataclass
class CsiDataset:
    """Stacked sequences sharing ``n_obs`` and matrix dims."""

    times: np.ndarray  # (S, n+1)
    observations: np.ndarray  # (S, n, N_t, N_c)
    targets: np.ndarray  # (S, N_t, N_c)
    noise_nmse: np.ndarray  # (S, n)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    def __getitem__(self, i: int) -> CsiSequence:
        return CsiSequence(self.times[i], self.observations[i], self.targets[i], self.noise_nmse[i])

    @property
    def n_obs(self) -> int:
        return self.observations.shape[1]

    @property
    def dims(self) -> tuple[int, int]:
        return self.targets.shape[1], self.targets.shape[2]

    @property
    def train_index(self) -> np.ndarray:
        return np.asarray(self.meta["split"]["train"], dtype=np.int64)

    @property
    def test_index(self) -> np.ndarray:
        return np.asarray(self.meta["split"]["test"], dtype=np.int64)

    def subset(self, idx) -> "CsiDataset":
        idx = np.asarray(idx, dtype=np.int64)
        meta = {k: v for k, v in self.meta.items() if k != "split"}
        meta["split"] = {"train": list(range(len(idx))), "test": []}
        return CsiDataset(self.times[idx], self.observations[idx], self.targets[idx],
                          self.noise_nmse[idx], meta)

    @classmethod
    def from_sequences(cls, seqs: list[CsiSequence], meta: dict | None = None) -> "CsiDataset":
        return cls(np.stack([s.times for s in seqs]),
                   np.stack([s.observations for s in seqs]),
                   np.stack([s.target for s in seqs]),
                   np.stack([s.noise_nmse for s in seqs]),
                   dict(meta or {}))


def split_indices(n_samples: int, seed: int, train_fraction: float = 0.8):
    perm = child_rng(seed, 0xC5, 0x5B1).permutation(n_samples)
    n_train = int(round(train_fraction * n_samples))
    return sorted(perm[:n_train].tolist()), sorted(perm[n_train:].tolist())


def generate_dataset(scene: Scene, ofdm: OfdmConfig, array: ArrayConfig, gen: GenConfig,
                     n_samples: int, seed: int) -> CsiDataset:
    """``n_samples`` sequences, sample ``i`` drawn from a child stream of
    ``(seed, i)``, with a reproducible 80/20 train/test split."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seqs, speeds = [], []
    for i in range(n_samples):
        seq, user0 = generate_sequence(scene, ofdm, array, gen, child_rng(seed, i))
        seqs.append(seq)
        speeds.append(user0.speed)
    train, test = split_indices(n_samples, seed)
    meta = {
        "seed": int(seed),
        "n_samples": n_samples,
        "scene": scene.to_dict(),
        "ofdm": asdict(ofdm),
        "array": asdict(array),
        "gen": gen.to_dict(),
        "speeds": speeds,
        "split": {"train": train, "test": test},
    }
    return CsiDataset.from_sequences(seqs, meta)


# ---------------------------------------------------------------------------
# CSI1 binary format

MAGIC = b"CSI1"
FORMAT_VERSION = 1
FLAG_NOISY = 1
FLAG_IRREGULAR = 2
_HEADER = struct.Struct("<4sHHIHHH")


def write_dataset(ds: CsiDataset, path) -> None:
    """Write ``path`` (CSI1 binary) and ``path + '.json'`` (sidecar)."""
    S, n = ds.noise_nmse.shape
    n_t, n_c = ds.dims
    flags = 0
    if np.any(ds.noise_nmse > 0):
        flags |= FLAG_NOISY
    gaps = np.diff(ds.times, axis=1)
    if not np.allclose(gaps, gaps[:, :1], rtol=0, atol=1e-15):
        flags |= FLAG_IRREGULAR
    mats = np.concatenate([ds.observations, ds.targets[:, None]], axis=1)
    inter = np.empty(mats.shape + (2,), dtype="<f4")
    inter[..., 0] = mats.real
    inter[..., 1] = mats.imag
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, flags, S, n, n_t, n_c))
        for i in range(S):
            fh.write(ds.times[i].astype("<f8").tobytes())
            fh.write(ds.noise_nmse[i].astype("<f4").tobytes())
            fh.write(inter[i].tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump(ds.meta, fh, indent=2, sort_keys=True)


def read_dataset(path) -> CsiDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, flags, S, n, n_t, n_c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a CSI1 file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported CSI1 version {version}")
    rec = np.dtype([
        ("times", "<f8", (n + 1,)),
        ("noise", "<f4", (n,)),
        ("mats", "<f4", (n + 1, n_t, n_c, 2)),
    ])
    body = np.frombuffer(raw, dtype=rec, count=S, offset=_HEADER.size)
    mats = body["mats"].astype(np.float64)
    cplx = mats[..., 0] + 1j * mats[..., 1]
    try:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = {}
    if "split" not in meta:
        tr, te = split_indices(S, meta.get("seed", 0))
        meta["split"] = {"train": tr, "test": te}
    return CsiDataset(body["times"].astype(np.float64), cplx[:, :n], cplx[:, n],
                      body["noise"].astype(np.float64), meta)


def default_setup(seed: int = 0, n_t: int = 8, n_c: int = 16, n_scatterers: int = 7,
                  los: bool = True):
    """Desk-scale scene and configs: 8 antennas, 16 subcarriers, 8 paths."""
    ofdm = OfdmConfig(n_c=n_c)
    array = ArrayConfig(n_t=n_t)
    scene = random_scene(seeded_rng(seed), n_scatterers=n_scatterers, los=los)
    return scene, ofdm, array
