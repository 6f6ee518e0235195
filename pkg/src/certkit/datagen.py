"""Initial-condition sampling, trajectory datasets, numerical differentiation, and I/O.

Dataset file layout (version tag ``certkit-ds-1``)::

    <header JSON, UTF-8, one line>\\n
    <payload: little-endian float64, row-major [entry][time][channel]>

Channels are ``states || derivs`` for plain datasets and
``states || derivs || delta || delta_derivs`` for paired datasets, so the
payload holds ``n * n_times * channels`` values.  The header carries the
system name and parameters, sampling region, ``dt``, horizon, seed,
differentiation method, the payload shape, and the version tag.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.signal import savgol_filter

from .dynamics import SystemSpec, Trajectory, integrate_batch, time_grid, rk4_rollout

DATASET_VERSION = "certkit-ds-1"
BURN_IN = 1000
MIN_ACCEPTANCE = 1e-3


class FormatError(ValueError):
    """A dataset or checkpoint file could not be parsed."""

    def __init__(self, message, offset=0, version=False):
        self.offset = offset
        self.version_mismatch = version
        super().__init__(f"{message} (offset {offset})")


class AcceptanceError(RuntimeError):
    """Rejection sampling accepted too few candidate pairs."""

    def __init__(self, rate):
        self.rate = rate
        super().__init__(f"pair acceptance rate {rate:.3g} below {MIN_ACCEPTANCE:g} after burn-in")


@dataclass
class SampleRegion:
    """Uniform sampling region: an axis-aligned box or a solid Euclidean ball."""

    kind: str
    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        if self.kind not in ("box", "ball"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        self.extent = np.atleast_1d(np.asarray(self.extent, dtype=float))
        if np.any(self.extent < 0):
            raise ValueError("region extents must be nonnegative")
        if self.kind == "box" and self.extent.size == 1:
            self.extent = np.full(self.center.size, float(self.extent[0]))

    @classmethod
    def box(cls, lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        return cls("box", (lo + hi) / 2, (hi - lo) / 2)

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", center, [radius])

    @property
    def dim(self):
        return self.center.size

    @property
    def volume(self) -> float:
        from scipy.special import gammaln

        if self.kind == "box":
            return float(np.prod(2 * self.extent))
        p = self.dim
        return float(np.exp(p / 2 * np.log(np.pi) - gammaln(p / 2 + 1)) * self.extent[0] ** p)

    def contains(self, x) -> np.ndarray:
        d = np.asarray(x, dtype=float) - self.center
        if self.kind == "box":
            return np.all(np.abs(d) <= self.extent, axis=-1)
        return np.linalg.norm(d, axis=-1) <= self.extent[0]

    def draw(self, rng, n):
        p = self.dim
        if self.kind == "box":
            return self.center + rng.uniform(-1.0, 1.0, size=(n, p)) * self.extent
        return self.center + _ball_draw(rng, n, p, self.extent[0])

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "extent": self.extent.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["center"], d["extent"])


def _ball_draw(rng, n, p, radius):
    g = rng.standard_normal(size=(n, p))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.uniform(size=(n, 1)) ** (1.0 / p)
    return g / norms * r


def sample_initial(region: SampleRegion, n: int, seed) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be at least 1")
    return region.draw(np.random.default_rng(seed), n)


@dataclass
class PairedTrajectory:
    base: Trajectory
    delta: Trajectory
    perturbation_norm: float


@dataclass
class Dataset:
    """A batch of trajectories on a shared uniform grid.

    ``states``/``derivs`` have shape ``(n, n_times, p)``.  Paired datasets also
    carry ``delta``/``delta_derivs`` with ``delta(t) = x2(t) - x1(t)``.
    """

    system: str
    system_params: dict
    region: SampleRegion
    dt: float
    horizon: float
    states: np.ndarray
    derivs: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    delta_derivs: Optional[np.ndarray] = None
    seed: Optional[int] = None
    method: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def p(self) -> int:
        return self.states.shape[2]

    @property
    def paired(self) -> bool:
        return self.delta is not None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[1]) * self.dt

    def __len__(self):
        return self.n

    def entry(self, i):
        base = Trajectory(self.times, self.states[i], None if self.derivs is None else self.derivs[i])
        if not self.paired:
            return base
        delta = Trajectory(self.times, self.delta[i],
                           None if self.delta_derivs is None else self.delta_derivs[i])
        return PairedTrajectory(base, delta, float(np.linalg.norm(self.delta[i, 0])))

    @property
    def entries(self):
        return [self.entry(i) for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(self.system, dict(self.system_params), self.region, self.dt, self.horizon,
                       self.states[idx], pick(self.derivs), pick(self.delta),
                       pick(self.delta_derivs), self.seed, dict(self.method))


# -- differentiation ----------------------------------------------------------

def _diff_array(Y, dt, method, window, polyorder, axis):
    n_times = Y.shape[axis]
    if method == "savgol":
        if window % 2 == 0 or window < 1:
            raise ValueError("savgol window must be a positive odd count")
        if polyorder >= window:
            raise ValueError("polyorder must be less than window")
        if n_times < window:
            raise ValueError(f"trajectory of length {n_times} is shorter than window {window}")
        return savgol_filter(Y, window, polyorder, deriv=1, delta=dt, axis=axis, mode="interp")
    if method == "spline":
        if n_times < 4:
            raise ValueError("spline differentiation needs at least 4 points")
        t = np.arange(n_times) * dt
        return CubicSpline(t, Y, axis=axis, bc_type="natural")(t, 1)
    raise ValueError(f"unknown differentiation method {method!r}")


def differentiate(traj: Trajectory, method: str = "savgol", window: int = 5,
                  polyorder: int = 2) -> Trajectory:
    """Fill ``traj.derivs`` by Savitzky-Golay or natural cubic-spline differentiation."""
    derivs = _diff_array(traj.states, traj.dt, method, window, polyorder, axis=0)
    return Trajectory(traj.times, traj.states, derivs)


def differentiate_dataset(ds: Dataset, method="savgol", window=5, polyorder=2) -> Dataset:
    ds.derivs = _diff_array(ds.states, ds.dt, method, window, polyorder, axis=1)
    if ds.paired:
        ds.delta_derivs = _diff_array(ds.delta, ds.dt, method, window, polyorder, axis=1)
    ds.method = {"method": method, "window": window, "polyorder": polyorder}
    return ds


# -- generation ----------------------------------------------------------------

def generate_trajectories(sys: SystemSpec, region: SampleRegion, n: int, t_final: float,
                          dt: float, seed, method="savgol", window=5, polyorder=2,
                          wrap_angle: bool = False) -> Dataset:
    """Roll out ``n`` trajectories from i.i.d. uniform initial conditions."""
    x0 = sample_initial(region, n, seed)
    if wrap_angle:
        from .dynamics import wrap_to_pi

        x0[:, 0] = wrap_to_pi(x0[:, 0])
    _, states = integrate_batch(sys, x0, t_final, dt)
    ds = Dataset(sys.name, dict(sys.params), region, dt, t_final, states, seed=seed)
    return differentiate_dataset(ds, method, window, polyorder)


def generate_pairs(sys: SystemSpec, region: SampleRegion, n: int, eps_pert: float,
                   overshoot: float, t_final: float, dt: float, seed, method="spline",
                   window=5, polyorder=2) -> Dataset:
    """Rejection-sample ``n`` nearby trajectory pairs.

    Each accepted slot ``i`` draws candidates from its own RNG stream
    ``default_rng([seed, i])``: the base point is drawn once, the perturbation
    is redrawn until ``x1 + dx`` lies in the region, and the pair is kept iff
    ``|x1(t) - x2(t)| <= overshoot`` on the whole grid.  The result depends
    only on ``seed``, not on batching.
    """
    if not eps_pert > 0:
        raise ValueError("eps_pert must be positive")
    if overshoot < eps_pert:
        raise ValueError("overshoot must be at least eps_pert")
    p = sys.state_dim
    times = time_grid(t_final, dt)
    rngs = [np.random.default_rng([int(seed), i]) for i in range(n)]

    def candidate(i):
        x1 = region.draw(rngs[i], 1)[0]
        for _ in range(10000):
            dx = _ball_draw(rngs[i], 1, p, eps_pert)[0]
            if region.contains(x1 + dx):
                return x1, dx
        raise AcceptanceError(0.0)

    states = np.empty((n, len(times), p))
    delta = np.empty((n, len(times), p))
    pending = np.arange(n)
    attempts = accepted = 0
    while pending.size:
        cands = [candidate(i) for i in pending]
        X1 = np.array([c[0] for c in cands])
        X2 = X1 + np.array([c[1] for c in cands])
        traj = np.swapaxes(rk4_rollout(sys.field, np.concatenate([X1, X2]), times), 0, 1)
        T1, T2 = traj[: len(pending)], traj[len(pending):]
        D = T2 - T1
        ok = np.all(np.linalg.norm(D, axis=-1) <= overshoot, axis=1)
        states[pending[ok]] = T1[ok]
        delta[pending[ok]] = D[ok]
        attempts += len(pending)
        accepted += int(ok.sum())
        if attempts >= BURN_IN and accepted / attempts < MIN_ACCEPTANCE:
            raise AcceptanceError(accepted / attempts)
        pending = pending[~ok]
    ds = Dataset(sys.name, dict(sys.params), region, dt, t_final, states, delta=delta, seed=seed)
    ds = differentiate_dataset(ds, method, window, polyorder)
    ds.method.update(eps_pert=eps_pert, overshoot=overshoot, acceptance_rate=accepted / attempts)
    return ds


def downsample_indices(n_times: int, count: Optional[int]) -> np.ndarray:
    """Evenly spaced time indices, always including the first grid point."""
    if count is None or count >= n_times:
        return np.arange(n_times)
    return np.unique(np.round(np.linspace(0, n_times - 1, count)).astype(int))


# -- persistence ---------------------------------------------------------------

def _channels(ds: Dataset):
    arrays = [ds.states, ds.derivs]
    if ds.paired:
        arrays += [ds.delta, ds.delta_derivs]
    return arrays


def save_dataset(ds: Dataset, path) -> None:
    arrays = _channels(ds)
    if any(a is None for a in arrays):
        raise ValueError("dataset must be differentiated before saving")
    payload = np.concatenate(arrays, axis=2)
    header = {
        "version": DATASET_VERSION,
        "system": ds.system,
        "system_params": ds.system_params,
        "region": ds.region.to_dict(),
        "dt": ds.dt,
        "horizon": ds.horizon,
        "seed": ds.seed,
        "method": ds.method,
        "paired": ds.paired,
        "shape": list(payload.shape),
        "byte_order": "little",
        "layout": "entry,time,channel",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header terminator", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}", offset=0) from None
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')!r}", offset=0,
                          version=True)
    shape = tuple(header["shape"])
    start = nl + 1
    need = 8 * int(np.prod(shape))
    have = len(raw) - start
    if have < need:
        raise FormatError(f"payload truncated: expected {need} bytes, found {have}",
                          offset=len(raw))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after payload", offset=start + need)
    payload = np.frombuffer(raw[start:], dtype="<f8").reshape(shape).astype(float)
    p = shape[2] // (4 if header["paired"] else 2)
    parts = [payload[..., k * p:(k + 1) * p] for k in range(shape[2] // p)]
    ds = Dataset(header["system"], header["system_params"],
                 SampleRegion.from_dict(header["region"]), header["dt"], header["horizon"],
                 parts[0], parts[1], seed=header["seed"], method=header["method"])
    if header["paired"]:
        ds.delta, ds.delta_derivs = parts[2], parts[3]
    return ds
