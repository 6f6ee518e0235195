"""Hinge-penalized certificate losses and an Adam trainer.

Each loss is an :class:`~certkit.models.Objective` over a fixed set of
constraint points, so ``value_and_grad(model, idx)`` evaluates the loss on the
minibatch ``idx``.  The regularizer ``reg * |theta|^2`` is split across
minibatches in proportion to their size, so one epoch of minibatch values
sums to the full-data loss.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .datagen import Dataset, downsample_indices
from .models import Certificate, Objective, hinge

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    def __init__(self, epoch, batch, message="non-finite loss"):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}")


@dataclass
class MarginSpec:
    """Margins and rates of a certificate condition.

    ``margin`` is the additive slack gamma of the hard-constrained program,
    ``rate`` the class-K coefficient (Lyapunov) or contraction rate (metric),
    and ``rho``/``slack`` the discrete-time decrease parameters.
    """

    margin: float = 0.0
    rate: float = 0.0
    rho: Optional[float] = None
    slack: float = 0.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.rho is not None and not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.slack < 0:
            raise ValueError("slack must be nonnegative")


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 1e-3
    batch_size: int = 1000
    reg: float = 0.1
    schedule: str = "constant"
    seed: int = 0
    constraints_per_traj: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0, lr and batch_size positive")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")


@dataclass
class TrainReport:
    final_loss: float
    loss_curve: list
    n_positive: int
    wall_time: float
    adam: dict = field(default_factory=lambda: {
        "beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# -- losses -------------------------------------------------------------------

class ConstraintLoss(Objective):
    """Sum of hinge terms over ``n_points`` constraint points plus ``reg |theta|^2``."""

    n_points: int
    reg: float

    def residuals(self, model, idx=None):
        """Per-point constraint residual; positive means the constraint is active."""
        raise NotImplementedError

    def hinge_part(self, model, idx=None) -> float:
        return float(np.maximum(self.residuals(model, idx), 0.0).sum())

    def n_positive(self, model) -> int:
        return int((self.residuals(model) > 0).sum())

    def _reg(self, model, idx):
        w = self.reg if idx is None else self.reg * len(idx) / self.n_points
        return w * float(model.theta @ model.theta), 2.0 * w * model.theta

    def value(self, model) -> float:
        return self.value_and_grad(model)[0]


def _pick(a, idx):
    return a if idx is None else a[idx]


class ContinuousLyapunovLoss(ConstraintLoss):
    """sum ReLU(<grad V(x), xdot> + rate V(x) + margin) + reg |theta|^2."""

    def __init__(self, X, Xdot, rate=0.0, margin=0.0, reg=0.0):
        self.X = np.asarray(X, dtype=float)
        self.Xdot = np.asarray(Xdot, dtype=float)
        self.rate, self.margin, self.reg = rate, margin, reg
        self.n_points = len(self.X)

    def residuals(self, model, idx=None):
        V, D, _ = model.lie_forward(_pick(self.X, idx), _pick(self.Xdot, idx))
        return D + self.rate * V + self.margin

    def value_and_grad(self, model, idx=None):
        V, D, cache = model.lie_forward(_pick(self.X, idx), _pick(self.Xdot, idx))
        h, active = hinge(D + self.rate * V + self.margin)
        g = model.lie_backward(cache, self.rate * active, active)
        r, gr = self._reg(model, idx)
        return float(h.sum()) + r, g + gr


class DiscreteLyapunovLoss(ConstraintLoss):
    """sum ReLU(V(e_{k+1}) - rho V(e_k) - slack) + reg |theta|^2."""

    def __init__(self, E0, E1, rho, slack=0.0, reg=0.0):
        self.E0 = np.asarray(E0, dtype=float)
        self.E1 = np.asarray(E1, dtype=float)
        if not 0 < rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        self.rho, self.slack, self.reg = rho, slack, reg
        self.n_points = len(self.E0)

    def _forward(self, model, idx):
        E0, E1 = _pick(self.E0, idx), _pick(self.E1, idx)
        V, _, cache = model.lie_forward(np.concatenate([E1, E0]))
        m = len(E0)
        return V[:m] - self.rho * V[m:], cache

    def residuals(self, model, idx=None):
        return self._forward(model, idx)[0] - self.slack

    def value_and_grad(self, model, idx=None):
        res, cache = self._forward(model, idx)
        h, active = hinge(res - self.slack)
        g = model.lie_backward(cache, np.concatenate([active, -self.rho * active]))
        r, gr = self._reg(model, idx)
        return float(h.sum()) + r, g + gr


def probe_directions(p, n_points, probe_count, seed):
    """2p fixed directions (axes and adjacent-axis diagonals) plus random unit probes."""
    eye = np.eye(p)
    diag = (eye + np.roll(eye, 1, axis=1)) / np.sqrt(2.0) if p > 1 else eye
    fixed = np.concatenate([eye, diag])
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal(size=(n_points, probe_count, p))
    rand /= np.linalg.norm(rand, axis=-1, keepdims=True)
    return np.concatenate([np.broadcast_to(fixed, (n_points,) + fixed.shape), rand], axis=1)


class MetricLoss(ConstraintLoss):
    """Differential-Lyapunov hinge for V = dx^T M(x) dx, plus a positive-definiteness penalty.

    Residual: ``2 ddx^T M dx + dx^T Mdot dx + rate * dx^T M dx``.  The penalty
    ``sum ReLU(mu |v|^2 - v^T M v)`` over probe directions is dropped for
    metrics that are positive definite by construction.
    """

    def __init__(self, X, Xdot, D, Ddot, rate, mu=1.0, reg=0.0, probe_count=2, seed=0,
                 pd_penalty=True):
        self.X, self.Xdot, self.D, self.Ddot = (np.asarray(a, dtype=float) for a in (X, Xdot, D, Ddot))
        self.rate, self.mu, self.reg = rate, mu, reg
        self.n_points = len(self.X)
        self.pd_penalty = pd_penalty
        self.probes = probe_directions(self.X.shape[1], self.n_points, probe_count, seed) if pd_penalty else None

    def _terms(self, model, idx):
        X, Xd, D, Dd = (_pick(a, idx) for a in (self.X, self.Xdot, self.D, self.Ddot))
        qDD, qdDD, c1 = model.quad_forward(X, D, D, Xd)
        qTD, _, c2 = model.quad_forward(X, Dd, D)
        return 2.0 * qTD + qdDD + self.rate * qDD, (c1, c2)

    def residuals(self, model, idx=None):
        return self._terms(model, idx)[0]

    def _uses_penalty(self, model):
        return self.pd_penalty and model.kind != "factored_metric"

    def pd_residuals(self, model, idx=None):
        probes = _pick(self.probes, idx)
        m, k, p = probes.shape
        X = np.repeat(_pick(self.X, idx), k, axis=0)
        v = probes.reshape(m * k, p)
        q, _, cache = model.quad_forward(X, v, v)
        return self.mu * np.einsum("ni,ni->n", v, v) - q, cache

    def value_and_grad(self, model, idx=None):
        res, (c1, c2) = self._terms(model, idx)
        h, active = hinge(res)
        g = model.quad_backward(c1, self.rate * active, active) + model.quad_backward(c2, 2.0 * active)
        total = float(h.sum())
        if self._uses_penalty(model):
            pres, cache = self.pd_residuals(model, idx)
            hp, ap = hinge(pres)
            total += float(hp.sum())
            g = g + model.quad_backward(cache, -ap)
        r, gr = self._reg(model, idx)
        return total + r, g + gr


def _points(ds: Dataset, count=None, paired=False):
    if ds.derivs is None:
        raise ValueError("dataset has no derivatives; differentiate it first")
    t = downsample_indices(ds.states.shape[1], count)
    flat = lambda a: a[:, t].reshape(-1, ds.p)  # noqa: E731
    if not paired:
        return flat(ds.states), flat(ds.derivs)
    if not ds.paired or ds.delta_derivs is None:
        raise ValueError("metric loss requires a paired dataset")
    return flat(ds.states), flat(ds.derivs), flat(ds.delta), flat(ds.delta_derivs)


def lyapunov_loss_continuous(model, dataset: Dataset, spec: MarginSpec, reg: float,
                             constraints_per_traj=None) -> ContinuousLyapunovLoss:
    X, Xdot = _points(dataset, constraints_per_traj)
    return ContinuousLyapunovLoss(X, Xdot, spec.rate, spec.margin, reg)


def step_pairs(ds: Dataset):
    if ds.states.shape[1] < 2:
        raise ValueError("discrete loss needs at least 2 steps per entry")
    return ds.states[:, :-1].reshape(-1, ds.p), ds.states[:, 1:].reshape(-1, ds.p)


def lyapunov_loss_discrete(model, dataset: Dataset, rho: float, slack: float,
                           reg: float) -> DiscreteLyapunovLoss:
    E0, E1 = step_pairs(dataset)
    return DiscreteLyapunovLoss(E0, E1, rho, slack, reg)


def metric_loss(model, dataset: Dataset, rate: float, mu: float, reg: float, probe_count=2,
                constraints_per_traj=None, seed=0, normalize=True) -> MetricLoss:
    """Build the metric loss; ``normalize`` rescales each (dx, ddx) pair to |dx| = 1.

    The residual is homogeneous of degree two in the pair, so rescaling
    leaves the sign of every constraint unchanged while putting the hinge on
    the same scale as the regularizer.
    """
    X, Xd, D, Dd = _points(dataset, constraints_per_traj, paired=True)
    if normalize:
        s = np.linalg.norm(D, axis=1, keepdims=True)
        s[s == 0] = 1.0
        D, Dd = D / s, Dd / s
    return MetricLoss(X, Xd, D, Dd, rate, mu, reg, probe_count, seed,
                      pd_penalty=model.kind != "factored_metric")


# -- optimizer ------------------------------------------------------------------

class Adam:
    def __init__(self, n, lr):
        self.lr = lr
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta, grad, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1 - ADAM_BETA2) * grad * grad
        mhat = self.m / (1 - ADAM_BETA1**self.t)
        vhat = self.v / (1 - ADAM_BETA2**self.t)
        return theta - lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def cosine_lr(lr, step, total):
    return 0.5 * lr * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))


def train(model: Certificate, loss: ConstraintLoss, cfg: TrainConfig, callback=None):
    """Minimize ``loss`` over ``model.theta`` with minibatch Adam.

    Returns a trained copy of ``model`` and a :class:`TrainReport`.
    """
    start = time.perf_counter()
    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.n_params, cfg.lr)
    n = loss.n_points
    per_epoch = int(np.ceil(n / cfg.batch_size))
    total = per_epoch * cfg.epochs
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            val, grad = loss.value_and_grad(model, idx)
            if not (np.isfinite(val) and np.all(np.isfinite(grad))):
                raise TrainingError(epoch, b)
            lr = cosine_lr(cfg.lr, step, total) if cfg.schedule == "cosine" else cfg.lr
            model.theta = opt.step(model.theta, grad, lr)
            model.project()
            epoch_loss += val
            step += 1
        curve.append(epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss, model)
    final = loss.value(model)
    report = TrainReport(final, curve, loss.n_positive(model), time.perf_counter() - start)
    return model, report
