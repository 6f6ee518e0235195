"""Global consequences of a small violation probability.

Grid-based violation sets, the radii ``r(eps)`` for Euclidean balls and for
ball x spherical-cap neighbourhoods, the exclusion-ball radii for learned
Lyapunov functions and metrics, sampled estimates of the sup-constants those
radii need, the comparison envelope, and the known-dynamics threshold.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import betainc, gammaln

from .datagen import Dataset, SampleRegion
from .dynamics import SystemSpec, rk4_rollout
from .statbounds import ContractionRate, LyapContinuous, contraction_residual


# -- grids ---------------------------------------------------------------------

@dataclass
class GridSpec:
    box: list
    resolution: list

    def __post_init__(self):
        self.box = [tuple(map(float, b)) for b in self.box]
        self.resolution = [int(r) for r in self.resolution]
        if len(self.box) != len(self.resolution):
            raise ValueError("box and resolution must have the same length")
        for lo, hi in self.box:
            if not lo < hi:
                raise ValueError(f"grid axis [{lo}, {hi}] is empty")

    @property
    def n_points(self) -> int:
        return int(np.prod(self.resolution))

    def points(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(self.box, self.resolution)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class GridResult:
    points: np.ndarray
    residual: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.residual > 0

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    def rows(self):
        for x, r in zip(self.points, self.residual):
            yield [*(format(v, ".17g") for v in x), format(r, ".17g"), int(r > 0)]

    def to_csv(self, path):
        p = self.points.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(p)] + ["residual", "violates"])
            w.writerows(self.rows())


def lie_residual(model, sys: SystemSpec, X, rate):
    V, D, _ = model.lie_forward(X, sys.field(X, 0.0))
    return D + rate * V


def grid_violation(model, sys: SystemSpec, grid: GridSpec, condition, chunk=20000) -> GridResult:
    """Evaluate a certificate condition at every grid point with ``xdot = f(x)``."""
    P = grid.points()
    res = np.empty(len(P))
    for s in range(0, len(P), chunk):
        X = P[s:s + chunk]
        if isinstance(condition, LyapContinuous):
            res[s:s + chunk] = lie_residual(model, sys, X, condition.rate)
        elif isinstance(condition, ContractionRate):
            res[s:s + chunk] = contraction_residual(model, sys, X, condition.rate)
        else:
            raise TypeError(f"grid_violation does not support {condition!r}")
    return GridResult(P, res)


# -- radii -----------------------------------------------------------------------

def unit_ball_volume(p: int) -> float:
    return float(np.exp(p / 2 * np.log(np.pi) - gammaln(p / 2 + 1)))


def r_eps_ball(eps: float, vol_X: float, p: int) -> float:
    """Radius of the largest Euclidean ball whose volume fraction of X is eps."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    if vol_X <= 0:
        raise ValueError("vol_X must be positive")
    return float((eps * vol_X / unit_ball_volume(p)) ** (1.0 / p))


def spherical_cap(r: float, p: int) -> float:
    """Normalized Haar measure of a geodesic cap of radius ``r`` on the sphere in R^p."""
    if p < 2:
        raise ValueError("spherical caps need p >= 2")
    if r < 0:
        raise ValueError("radius must be nonnegative")
    a = (p - 1) / 2.0
    if r < np.pi / 2:
        return float(0.5 * betainc(a, 0.5, np.sin(r) ** 2))
    if r < np.pi:
        return float(1.0 - 0.5 * betainc(a, 0.5, np.sin(np.pi - r) ** 2))
    return 1.0


def r_eps_sphere(eps: float, vol_X: float, p: int, tol: float = 1e-13) -> float:
    """sup{r > 0 : r^p zeta_p(r) <= eps vol(X) / vol(B)} by bisection."""
    if not 0 <= eps <= 1:
        raise ValueError("eps must lie in [0, 1]")
    target = eps * vol_X / unit_ball_volume(p)
    if target == 0:
        return 0.0
    g = lambda r: r**p * spherical_cap(r, p)  # noqa: E731
    lo, hi = 0.0, max(np.pi, target ** (1.0 / p)) + 1.0
    while g(hi) <= target:
        hi *= 2
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if g(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


# -- constants and exclusion balls ----------------------------------------------------

@dataclass
class GlobalConstants:
    """Sup-constants entering the exclusion-ball radii.

    ``m``/``L`` are metric eigenvalue bounds and may be ``None`` for scalar
    certificates.
    """

    B_gradV: float
    B_gradq: float
    B_H: float
    mu: float
    lam: float
    eta: float
    m: Optional[float] = None
    L: Optional[float] = None
    n_probe: int = 0
    inflation: float = 1.0

    def __post_init__(self):
        for name in ("B_gradV", "B_gradq", "B_H"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.mu <= 0 or self.lam <= 0:
            raise ValueError("mu and lam must be positive")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.m is not None and self.L is not None and not 0 < self.m <= self.L:
            raise ValueError("need 0 < m <= L")

    def inflated(self, factor: float = 1.5) -> "GlobalConstants":
        """Sup estimates scaled up by ``factor``; lower bounds ``mu``/``m`` scaled down."""
        return replace(
            self,
            B_gradV=self.B_gradV * factor, B_gradq=self.B_gradq * factor, B_H=self.B_H * factor,
            mu=self.mu / factor,
            m=None if self.m is None else self.m / factor,
            L=None if self.L is None else self.L * factor,
            inflation=self.inflation * factor,
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class KLFunctionSpec:
    """Exponential class-KL bound beta(s, t) = M s exp(-alpha t)."""

    M: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.M < 1 or self.alpha <= 0:
            raise ValueError("need M >= 1 and alpha > 0")

    def __call__(self, s, t):
        return self.M * np.asarray(s) * np.exp(-self.alpha * np.asarray(t))


def fit_kl_function(ds: Dataset) -> KLFunctionSpec:
    """Fit beta to the decay of |dx(t)| on paired data.

    The rate is the least-squares slope of ``log(|dx(t)| / |dx(0)|)`` against
    ``t``; ``M`` is then the smallest constant making the bound hold on every
    sample.
    """
    if not ds.paired:
        raise ValueError("fitting a KL bound needs paired data")
    norms = np.linalg.norm(ds.delta, axis=-1)
    ratio = norms / norms[:, :1]
    t = np.broadcast_to(ds.times, ratio.shape)
    y = np.log(np.maximum(ratio, 1e-300))
    slope = np.sum(t * y) / np.sum(t * t)
    alpha = max(-slope, 1e-6)
    M = float(max(1.0, np.max(ratio * np.exp(alpha * t))))
    return KLFunctionSpec(M, alpha)


def lyap_ball_radius(consts: GlobalConstants, beta: KLFunctionSpec, r_eps: float) -> float:
    """Radius outside which a learned V decreases at rate (1 - eta) lam."""
    c = consts
    return float(np.sqrt(beta(r_eps, 0.0) * (c.B_gradV + c.B_gradq / c.lam) / (c.eta * c.mu)))


def metric_ball_radius(consts: GlobalConstants, r_eps: float, conservative: bool = False) -> float:
    """Exclusion radius for a learned metric; ``conservative`` uses sqrt(2) r(eps)."""
    c = consts
    if c.m is None or c.L is None:
        raise ValueError("metric radius needs eigenvalue bounds m and L")
    r = np.sqrt(2.0) * r_eps if conservative else r_eps
    num = r * c.B_H * (c.B_gradq + c.lam * c.B_gradV) * (c.L / c.m) ** 1.5
    return float(np.sqrt(num / (c.eta * c.lam * c.mu)))


def _fd_grad(fn, X, rel=1e-5):
    """Central-difference gradient of a batched scalar function."""
    G = np.empty_like(X)
    h = rel * (1.0 + np.linalg.norm(X, axis=1))
    for k in range(X.shape[1]):
        E = np.zeros_like(X)
        E[:, k] = h
        G[:, k] = (fn(X + E) - fn(X - E)) / (2 * h)
    return G


def hessian_norm(sys: SystemSpec, X, rel=1e-5):
    """Frobenius norm of d^2 f / dx^2 (finite differences of the Jacobian)."""
    p = X.shape[1]
    h = rel * (1.0 + np.linalg.norm(X, axis=1))
    total = np.zeros(len(X))
    for k in range(p):
        E = np.zeros_like(X)
        E[:, k] = h
        dJ = (sys.jacobian(X + E, 0.0) - sys.jacobian(X - E, 0.0)) / (2 * h)[:, None, None]
        total += np.sum(dJ**2, axis=(1, 2))
    return np.sqrt(total)


def estimate_constants(model, sys: SystemSpec, region: Optional[SampleRegion] = None,
                       n_probe: int = 10000, seed=0, lam: float = 1.0, eta: float = 0.5,
                       points=None) -> GlobalConstants:
    """Sampling-based estimates of the sup-constants (lower bounds on the true sups).

    Probes are ``n_probe`` seeded uniform draws from ``region`` or, when given,
    rows of ``points`` (e.g. states visited by trajectories).
    """
    rng = np.random.default_rng(seed)
    if points is not None:
        X = np.asarray(points, dtype=float)
        if len(X) > n_probe:
            X = X[rng.choice(len(X), n_probe, replace=False)]
    else:
        X = region.draw(rng, n_probe)
    B_H = float(hessian_norm(sys, X).max()) if sys.jacobian is not None else 0.0
    if not model.is_metric:
        B_gradV = float(np.linalg.norm(model.grad_x(X), axis=1).max())
        q = lambda Z: model.lie_derivative(Z, sys.field(Z, 0.0))  # noqa: E731
        B_gradq = float(np.linalg.norm(_fd_grad(q, X), axis=1).max())
        nz = np.linalg.norm(X, axis=1) > 1e-9
        mu = float(np.min(model.value(X[nz]) / np.sum(X[nz] ** 2, axis=1)))
        return GlobalConstants(B_gradV, B_gradq, B_H, mu, lam, eta, n_probe=len(X))
    # metric: V(x, dx) = dx^T M(x) dx on the tangent bundle with |dx| = 1
    p = X.shape[1]
    D = rng.standard_normal(size=X.shape)
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    Z = np.concatenate([X, D], axis=1)

    def V(Zb):
        return model.quad_forward(Zb[:, :p], Zb[:, p:], Zb[:, p:])[0]

    def q(Zb):
        x, d = Zb[:, :p], Zb[:, p:]
        xd = sys.field(x, 0.0)
        dd = np.einsum("nij,nj->ni", sys.jacobian(x, 0.0), d)
        q1, qd, _ = model.quad_forward(x, d, d, xd)
        q2, _, _ = model.quad_forward(x, dd, d)
        return 2.0 * q2 + qd

    B_gradV = float(np.linalg.norm(_fd_grad(V, Z), axis=1).max())
    B_gradq = float(np.linalg.norm(_fd_grad(q, Z), axis=1).max())
    eig = np.linalg.eigvalsh(model.value(X))
    m, L = float(eig[:, 0].min()), float(eig[:, -1].max())
    return GlobalConstants(B_gradV, B_gradq, B_H, m, lam, eta, m=m, L=L, n_probe=len(X))


def comparison_envelope(V0: float, lam: float, consts: GlobalConstants, beta: KLFunctionSpec,
                        r_eps: float, t_grid) -> np.ndarray:
    """RK4 solution of u' = -lam u + (B_gradq + lam B_gradV) beta(r_eps, t), u(0) = V0."""
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) > 2 and not np.allclose(np.diff(t_grid), t_grid[1] - t_grid[0]):
        raise ValueError("t_grid must be uniform")
    c = consts.B_gradq + lam * consts.B_gradV
    rhs = lambda u, t: -lam * u + c * beta(r_eps, t)  # noqa: E731
    return rk4_rollout(rhs, np.asarray(V0, dtype=float), t_grid - t_grid[0] if len(t_grid) else t_grid,
                       check=False)


def known_dynamics_eps(lam: float, l: float, alpha: float, lipschitz: dict, bounds: dict,
                       p: int, vol_X: float) -> float:
    """Violation-probability threshold below which a known system is contracting at lam / alpha.

    ``lipschitz`` holds ``L_M, L_gradM, L_J, L_f``; ``bounds`` holds ``B_M, B_gradM, B_J, B_f``.
    """
    if alpha <= 1:
        raise ValueError("alpha must exceed 1")
    Lp, B = lipschitz, bounds
    denom = alpha * (2 * lam * Lp["L_M"] + Lp["L_gradM"] * B["B_f"] + B["B_gradM"] * Lp["L_f"]
                     + 2 * Lp["L_J"] * B["B_M"] + 2 * Lp["L_M"] * B["B_J"])
    return float((2 * lam * l * (alpha - 1) / denom) ** p * unit_ball_volume(p) / vol_X)


# -- end-to-end Lyapunov check ------------------------------------------------------

def shrink_region(region: SampleRegion, r: float) -> SampleRegion:
    """The set of centers whose r-ball stays inside ``region``."""
    ext = region.extent - r
    if np.any(ext <= 0):
        raise ValueError("region too small for the requested margin")
    return SampleRegion(region.kind, region.center, ext)


def decrease_outside_ball(model, sys: SystemSpec, starts, t_final, dt, lam, eta, r_b):
    """Check <grad V, f> <= -(1 - eta) lam V along flows, away from the r_b ball.

    Returns ``(n_checked, n_violating)`` over all visited states with
    ``|x| > r_b``.
    """
    times = np.arange(int(round(t_final / dt)) + 1) * dt
    states = rk4_rollout(sys.field, np.atleast_2d(starts), times).reshape(-1, sys.state_dim)
    far = np.linalg.norm(states, axis=1) > r_b
    if not far.any():
        return 0, 0
    res = lie_residual(model, sys, states[far], (1 - eta) * lam)
    return int(far.sum()), int((res > 0).sum())
