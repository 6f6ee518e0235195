"""Violation counting and generalization bounds for learned certificates."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import betainc, gammaln, logsumexp

from .datagen import Dataset, downsample_indices
from .dynamics import SystemSpec

BISECT_TOL = 1e-12


# -- certificate conditions --------------------------------------------------------

@dataclass(frozen=True)
class LyapContinuous:
    """<grad V, xdot> + rate * V <= 0 along the data."""

    rate: float = 0.0

    def describe(self):
        return f"lyap_continuous(rate={self.rate:g})"


@dataclass(frozen=True)
class LyapDiscrete:
    """V(e_{k+1}) - rho V(e_k) - slack <= 0 for consecutive steps."""

    rho: float
    slack: float = 0.0

    def describe(self):
        return f"lyap_discrete(rho={self.rho:g}, slack={self.slack:g})"


@dataclass(frozen=True)
class MetricDiffLyap:
    """d/dt (dx^T M dx) + rate * dx^T M dx <= 0 on paired data."""

    rate: float

    def describe(self):
        return f"metric_diff_lyap(rate={self.rate:g})"


@dataclass(frozen=True)
class ContractionRate:
    """lambda_max(J^T M + M J + Mdot + 2 rate M) <= 0 with the true Jacobian."""

    rate: float
    system: SystemSpec = field(compare=False, repr=False)

    def describe(self):
        return f"contraction_rate(rate={self.rate:g})"


def contraction_residual(model, sys: SystemSpec, X, rate):
    """Largest eigenvalue of J^T M + M J + Mdot + 2 rate M at each row of ``X``."""
    if sys.jacobian is None:
        raise ValueError("contraction condition requires the system jacobian")
    X = np.atleast_2d(X)
    J = sys.jacobian(X, 0.0)
    M = model.value(X)
    Md = model.time_derivative(X, sys.field(X, 0.0))
    JM = np.einsum("nki,nkj->nij", J, M)
    S = JM + np.swapaxes(JM, 1, 2) + Md + 2.0 * rate * M
    return np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, 1, 2)))[:, -1]


def pointwise_residuals(model, dataset: Dataset, condition, constraints_per_traj=None):
    """Residual array of shape ``(n_entries, n_times)`` for ``condition``."""
    n = dataset.n
    t = downsample_indices(dataset.states.shape[1], constraints_per_traj)
    if isinstance(condition, LyapDiscrete):
        E0 = dataset.states[:, :-1].reshape(-1, dataset.p)
        E1 = dataset.states[:, 1:].reshape(-1, dataset.p)
        res = model.value(E1) - condition.rho * model.value(E0) - condition.slack
        return res.reshape(n, -1)
    X = dataset.states[:, t].reshape(-1, dataset.p)
    if isinstance(condition, LyapContinuous):
        if dataset.derivs is None:
            raise ValueError("lyap_continuous needs dataset derivatives")
        Xd = dataset.derivs[:, t].reshape(-1, dataset.p)
        V, D, _ = model.lie_forward(X, Xd)
        return (D + condition.rate * V).reshape(n, -1)
    if isinstance(condition, MetricDiffLyap):
        if not dataset.paired or dataset.delta_derivs is None:
            raise ValueError("metric_diff_lyap needs a differentiated paired dataset")
        Xd = dataset.derivs[:, t].reshape(-1, dataset.p)
        D = dataset.delta[:, t].reshape(-1, dataset.p)
        Dd = dataset.delta_derivs[:, t].reshape(-1, dataset.p)
        q, qd, _ = model.quad_forward(X, D, D, Xd)
        q2, _, _ = model.quad_forward(X, Dd, D)
        return (2.0 * q2 + qd + condition.rate * q).reshape(n, -1)
    if isinstance(condition, ContractionRate):
        return contraction_residual(model, condition.system, X, condition.rate).reshape(n, -1)
    raise TypeError(f"unsupported condition {condition!r}")


@dataclass
class ViolationReport:
    n: int
    k: int
    condition: str
    worst: np.ndarray

    @property
    def rate(self) -> float:
        return self.k / self.n if self.n else 0.0

    def to_dict(self):
        return {"n": self.n, "k": self.k, "rate": self.rate, "condition": self.condition,
                "worst_residual": np.asarray(self.worst).tolist()}


def empirical_violation(model, dataset: Dataset, condition,
                        constraints_per_traj=None) -> ViolationReport:
    """Count entries whose residual is strictly positive at any grid time."""
    res = pointwise_residuals(model, dataset, condition, constraints_per_traj)
    worst = res.max(axis=1)
    return ViolationReport(dataset.n, int((worst > 0).sum()), condition.describe(), worst)


# -- bounds ------------------------------------------------------------------------

@dataclass
class BoundReport:
    eps: float
    delta: float
    method: str
    inputs: dict
    valid: bool = True
    note: str = ""

    def to_dict(self):
        return asdict(self)


def binomial_cdf(k: int, n: int, p: float) -> float:
    """P[Bin(n, p) <= k] via the regularized incomplete beta function."""
    if k < 0:
        return 0.0
    if k >= n:
        return 1.0
    return float(betainc(n - k, k + 1, 1.0 - p))


def _bisect_decreasing(fn, target, lo, hi, tol=BISECT_TOL):
    """Largest x in [lo, hi] with fn(x) >= target, for nonincreasing fn."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fn(mid) >= target:
            lo = mid
        else:
            hi = mid
    return lo


def chernoff_ucb(k: int, n: int, delta: float) -> float:
    """Exact binomial-tail upper confidence bound on a violation probability.

    Returns the largest ``p`` with ``P[Bin(n, p) <= k] >= delta``; with
    probability ``1 - delta`` the true rate is at most this value.
    """
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if k == n:
        return 1.0
    return _bisect_decreasing(lambda p: binomial_cdf(k, n, p), delta, k / n, 1.0)


def rcp_beta(eps: float, n: int, d: int) -> float:
    """sum_{i<d} C(n, i) eps^i (1 - eps)^(n - i), summed in log space."""
    if eps <= 0:
        return 1.0
    if eps >= 1:
        return 1.0 if d > n else 0.0
    i = np.arange(d)
    logc = gammaln(n + 1) - gammaln(i + 1) - gammaln(n - i + 1)
    return float(np.exp(logsumexp(logc + i * np.log(eps) + (n - i) * np.log1p(-eps))))


def rcp_epsilon(n: int, d: int, delta: float) -> float:
    """Solve ``beta(eps) = delta`` for the randomized-convex-program bound."""
    if d < 1:
        raise ValueError("decision dimension must be positive")
    if n < d:
        warnings.warn(f"RCP bound vacuous: n={n} < d={d}", RuntimeWarning, stacklevel=2)
        return 1.0
    return _bisect_decreasing(lambda e: rcp_beta(e, n, d), delta, 0.0, 1.0)


def chernoff_bound(k: int, n: int, delta: float) -> BoundReport:
    return BoundReport(chernoff_ucb(k, n, delta), delta, "chernoff_test_set", {"n": n, "k": k})


def rcp_bound(n: int, d: int, delta: float, convex: bool = True) -> BoundReport:
    """RCP bound with ``d`` decision variables; ``convex`` flags whether its premise holds."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        eps = rcp_epsilon(n, d, delta)
    if n < d:
        note = "vacuous: fewer scenarios than decision variables"
    elif convex:
        note = "assumes the penalized fit attains the convex program's solution"
    else:
        note = "certificate not linear in its parameters; bound shown for reference only"
    return BoundReport(eps, delta, "rcp", {"n": n, "d": d}, valid=convex and n >= d, note=note)


def holdout_split(n: int, split: float, seed):
    if not 0 < split < 1:
        raise ValueError("split must lie in (0, 1)")
    n_train = int(round(split * n))
    if n - n_train < 1:
        raise ValueError("holdout set is empty")
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:]


def holdout_evaluate(model_factory: Callable, dataset: Dataset, split: float, delta: float,
                     seed, condition, constraints_per_traj=None) -> BoundReport:
    """Train on a seeded ``split`` fraction and bound the error on the remainder."""
    train_idx, hold_idx = holdout_split(dataset.n, split, seed)
    model = model_factory(dataset.subset(train_idx))
    rep = empirical_violation(model, dataset.subset(hold_idx), condition, constraints_per_traj)
    return BoundReport(chernoff_ucb(rep.k, rep.n, delta), delta, "holdout",
                       {"n": rep.n, "k": rep.k, "n_train": len(train_idx)})


def percentiles(values, qs=(10, 50, 90)) -> dict:
    """Percentile summary of per-seed values, keyed ``p10``, ``p50``, ``p90``."""
    v = np.sort(np.asarray(values, dtype=float))
    return {f"p{q}": float(np.percentile(v, q)) for q in qs}
