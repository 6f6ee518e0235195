"""Adaptive cancellation of a sinusoidal disturbance on the damped pendulum.

The disturbance ``<a, kappa phi(t)>`` with ``phi_i(t) = sin(omega_i t)``
enters the velocity equation alongside the control.  The estimate ``a_hat``
follows a gradient law driven by the second component of ``grad V``, where
``V`` is a (learned) Lyapunov function of the unforced pendulum.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dynamics import PENDULUM_DEFAULTS, Trajectory, rk4_rollout, time_grid

N_HARMONICS = 10
DEFAULT_GAIN = 15.0


@dataclass
class DisturbanceSpec:
    a: np.ndarray
    omega: np.ndarray
    kappa: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.omega = np.asarray(self.omega, dtype=float)
        if self.a.shape != (N_HARMONICS,) or self.omega.shape != (N_HARMONICS,):
            raise ValueError(f"coefficients and frequencies must have length {N_HARMONICS}")

    @classmethod
    def draw(cls, seed, kappa: float = 1.0) -> "DisturbanceSpec":
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(N_HARMONICS)
        omega = rng.uniform(0.0, 2 * np.pi, N_HARMONICS)
        return cls(a, omega, kappa)

    def phi(self, t):
        return np.sin(self.omega * t)

    def __call__(self, t):
        """Disturbance torque at time ``t``."""
        return self.kappa * float(self.a @ self.phi(t))


@dataclass
class AdaptiveResult:
    trajectory: Trajectory
    a_hat: np.ndarray
    u: np.ndarray
    dist: DisturbanceSpec
    gain: float
    params: dict = field(default_factory=dict)

    @property
    def estimation_error(self) -> np.ndarray:
        return np.linalg.norm(self.a_hat - self.dist.a, axis=1)

    def terminal_norm(self) -> float:
        return float(np.linalg.norm(self.trajectory.states[-1]))

    def sup_norm(self) -> float:
        return float(np.linalg.norm(self.trajectory.states, axis=1).max())

    def augmented_value(self, model) -> np.ndarray:
        """V(x) + kappa / (2 gain m l^2) |a_hat - a|^2 along the run.

        This is the function the adaptive law makes nonincreasing whenever
        ``<grad V, f> <= 0``.
        """
        inertia = self.params["m"] * self.params["l"] ** 2
        V = model.value(self.trajectory.states)
        w = self.dist.kappa / (2.0 * self.gain * inertia) if self.gain > 0 else 0.0
        return V + w * self.estimation_error**2

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "theta", "theta_dot", "u", "a_err"])
            for t, x, u, e in zip(self.trajectory.times, self.trajectory.states, self.u,
                                  self.estimation_error):
                w.writerow([format(v, ".17g") for v in (t, x[0], x[1], u, e)])


def _pendulum_consts(params):
    c = dict(PENDULUM_DEFAULTS)
    c.update(params or {})
    inertia = c["m"] * c["l"] ** 2
    return c, inertia


def simulate_adaptive(model, dist: DisturbanceSpec, x0=(2.0, 0.0), t_final: float = 40.0,
                      dt: float = 0.01, adapt: bool = True, gain: float = DEFAULT_GAIN,
                      params: Optional[dict] = None, linearized: bool = False) -> AdaptiveResult:
    """RK4 on the 12-dimensional state ``(theta, theta_dot, a_hat)``.

    With ``adapt=False`` the control is zero and ``a_hat`` is frozen at 0.
    ``linearized`` replaces ``sin(theta)`` by ``theta`` (small-angle model).
    """
    if gain < 0:
        raise ValueError("gain must be nonnegative")
    c, inertia = _pendulum_consts(params)
    kappa = dist.kappa
    restoring = (lambda th: th) if linearized else np.sin

    def rhs(z, t):
        x, ah = z[:2], z[2:]
        ph = dist.phi(t)
        u = kappa * float(ah @ ph) if adapt else 0.0
        acc = (u - kappa * float(dist.a @ ph) - c["b"] * x[1]
               - c["m"] * c["g"] * c["l"] * restoring(x[0])) / inertia
        dz = np.empty(2 + N_HARMONICS)
        dz[0], dz[1] = x[1], acc
        if adapt:
            g2 = model.grad_x(x[None])[0, 1]
            dz[2:] = -gain * ph * g2
        else:
            dz[2:] = 0.0
        return dz

    times = time_grid(t_final, dt)
    z0 = np.concatenate([np.asarray(x0, dtype=float), np.zeros(N_HARMONICS)])
    Z = rk4_rollout(rhs, z0, times)
    a_hat = Z[:, 2:]
    Phi = np.sin(np.outer(times, dist.omega))
    u = kappa * np.sum(a_hat * Phi, axis=1) if adapt else np.zeros(len(times))
    return AdaptiveResult(Trajectory(times, Z[:, :2]), a_hat, u, dist, gain if adapt else 0.0, c)


def ideal_oracle_run(dist: DisturbanceSpec, x0=(2.0, 0.0), t_final: float = 40.0,
                     dt: float = 0.01, params: Optional[dict] = None) -> AdaptiveResult:
    """Perfect cancellation ``u = <a, kappa phi(t)>``; equals the unforced pendulum."""
    c, inertia = _pendulum_consts(params)

    def rhs(x, t):
        ph = dist.phi(t)
        u = dist.kappa * float(dist.a @ ph)
        acc = (u - dist.kappa * float(dist.a @ ph) - c["b"] * x[1]
               - c["m"] * c["g"] * c["l"] * np.sin(x[0])) / inertia
        return np.array([x[1], acc])

    times = time_grid(t_final, dt)
    X = rk4_rollout(rhs, np.asarray(x0, dtype=float), times)
    a_hat = np.broadcast_to(dist.a, (len(times), N_HARMONICS)).copy()
    u = dist.kappa * np.sin(np.outer(times, dist.omega)) @ dist.a
    return AdaptiveResult(Trajectory(times, X), a_hat, u, dist, 0.0, c)
