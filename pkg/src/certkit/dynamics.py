"""Benchmark dynamical systems, prolongation, and a fixed-step RK4 integrator.

All vector fields are written to broadcast over leading batch axes: a state
array of shape ``(..., p)`` maps to a derivative of the same shape, and the
Jacobian maps to ``(..., p, p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional

import numpy as np

DIVERGENCE_NORM = 1e6


class DivergenceError(RuntimeError):
    """Raised when an integration produces a non-finite or exploding state."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"integration diverged at step {step}")


def wrap_to_pi(theta):
    """Wrap an angle in radians to the interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - theta, 2 * np.pi)


@dataclass
class SystemSpec:
    """A continuous-time system ``xdot = field(x, t)``.

    ``jacobian`` is optional for user systems; every builtin provides one.
    """

    state_dim: int
    field: Callable[[np.ndarray, float], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    name: str = "custom"
    params: dict = dc_field(default_factory=dict)

    def __call__(self, x, t=0.0):
        return eval_field(self, x, t)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    derivs: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have equal length")
        if self.derivs is not None and len(self.derivs) != len(self.states):
            raise ValueError("derivs and states must have equal length")

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    def __len__(self):
        return len(self.times)


@dataclass
class ProlongatedState:
    x: np.ndarray
    delta_x: np.ndarray

    def stack(self) -> np.ndarray:
        return np.concatenate([self.x, self.delta_x], axis=-1)

    @classmethod
    def split(cls, z) -> "ProlongatedState":
        z = np.asarray(z, dtype=float)
        p = z.shape[-1] // 2
        return cls(z[..., :p], z[..., p:])


def _check_dim(sys: SystemSpec, x: np.ndarray):
    if x.shape[-1] != sys.state_dim:
        raise ValueError(
            f"state has dimension {x.shape[-1]}, system '{sys.name}' expects {sys.state_dim}"
        )


def eval_field(sys: SystemSpec, x, t: float = 0.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_dim(sys, x)
    return np.asarray(sys.field(x, t), dtype=float)


def eval_jacobian(sys: SystemSpec, x, t: float = 0.0) -> np.ndarray:
    if sys.jacobian is None:
        raise ValueError(f"system '{sys.name}' has no jacobian")
    x = np.asarray(x, dtype=float)
    _check_dim(sys, x)
    return np.asarray(sys.jacobian(x, t), dtype=float)


# -- builtins ---------------------------------------------------------------

PENDULUM_DEFAULTS = {"m": 1.0, "g": 9.81, "l": 1.0, "b": 2.0}
VDP_DEFAULTS = {"alpha": 1.0, "k": 1.0, "omega": 1.0}


def _positive_params(name, params, defaults):
    out = dict(defaults)
    for key, val in params.items():
        if key not in defaults:
            raise ValueError(f"unknown parameter '{key}' for system '{name}'")
        out[key] = float(val)
    for key, val in out.items():
        if not val > 0:
            raise ValueError(f"parameter '{key}' of system '{name}' must be positive, got {val}")
    return out


def _pendulum(params):
    c = _positive_params("pendulum", params, PENDULUM_DEFAULTS)
    inertia = c["m"] * c["l"] ** 2
    grav = c["m"] * c["g"] * c["l"] / inertia
    damp = c["b"] / inertia

    def field(x, t=0.0):
        th, om = x[..., 0], x[..., 1]
        return np.stack([om, -damp * om - grav * np.sin(th)], axis=-1)

    def jacobian(x, t=0.0):
        th = x[..., 0]
        J = np.zeros(x.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -grav * np.cos(th)
        J[..., 1, 1] = -damp
        return J

    return SystemSpec(2, field, jacobian, "pendulum", c)


def _vdp(params):
    c = _positive_params("vdp", params, VDP_DEFAULTS)
    alpha, k, w2 = c["alpha"], c["k"], c["omega"] ** 2

    def field(x, t=0.0):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -alpha * (x1**2 + k) * x2 - w2 * x1], axis=-1)

    def jacobian(x, t=0.0):
        x1, x2 = x[..., 0], x[..., 1]
        J = np.zeros(x.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -2 * alpha * x1 * x2 - w2
        J[..., 1, 1] = -alpha * (x1**2 + k)
        return J

    return SystemSpec(2, field, jacobian, "vdp", c)


def _gradflow(params):
    dim = int(params.get("dim", 6))
    if set(params) - {"dim"} or dim < 1:
        raise ValueError("gradflow6d accepts only a positive 'dim' parameter")

    # loss(x) = |x|^2 + sum_{i != j} x_i^2 x_j^2 ; field = -grad(loss)
    def field(x, t=0.0):
        sq = x**2
        others = sq.sum(axis=-1, keepdims=True) - sq
        return -2 * x - 4 * x * others

    def jacobian(x, t=0.0):
        sq = x**2
        others = sq.sum(axis=-1, keepdims=True) - sq
        J = -8 * x[..., :, None] * x[..., None, :]
        diag = -2 - 4 * others
        idx = np.arange(dim)
        J[..., idx, idx] = diag
        return J

    return SystemSpec(dim, field, jacobian, "gradflow6d", {"dim": dim})


def _linear(params):
    if "A" not in params:
        raise ValueError("linear system requires parameter 'A'")
    A = np.atleast_2d(np.asarray(params["A"], dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ValueError("linear system matrix must be square")
    p = A.shape[0]

    def field(x, t=0.0):
        return x @ A.T

    def jacobian(x, t=0.0):
        return np.broadcast_to(A, x.shape[:-1] + (p, p)).copy()

    return SystemSpec(p, field, jacobian, "linear", {"A": A.tolist()})


_BUILTINS = {
    "pendulum": _pendulum,
    "vdp": _vdp,
    "gradflow6d": _gradflow,
    "linear": _linear,
}


def make_builtin(name: str, params: Optional[dict] = None) -> SystemSpec:
    """Construct a builtin system: ``pendulum``, ``vdp``, ``gradflow6d`` or ``linear``."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown system '{name}'; choose from {sorted(_BUILTINS)}") from None
    return factory(dict(params or {}))


def prolongate(sys: SystemSpec) -> SystemSpec:
    """Lift ``sys`` to the tangent bundle: ``(x, dx) -> (f(x), J(x) dx)``."""
    if sys.jacobian is None:
        raise ValueError(f"cannot prolongate '{sys.name}': jacobian unavailable")
    p = sys.state_dim

    def field(z, t=0.0):
        x, dx = z[..., :p], z[..., p:]
        J = sys.jacobian(x, t)
        return np.concatenate([sys.field(x, t), np.einsum("...ij,...j->...i", J, dx)], axis=-1)

    return SystemSpec(2 * p, field, None, f"prolongated-{sys.name}", dict(sys.params))


# -- integration ------------------------------------------------------------

def time_grid(t_final: float, dt: float) -> np.ndarray:
    n_steps = int(round(t_final / dt))
    return np.arange(n_steps + 1) * dt


def rk4_step(field, x, t, dt):
    k1 = field(x, t)
    k2 = field(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = field(x + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = field(x + dt * k3, t + dt)
    return x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_rollout(field, x0, times, check=True):
    """Classical RK4 over a uniform grid; ``x0`` may carry batch axes.

    Returns an array of shape ``(len(times),) + x0.shape``.
    """
    x = np.array(x0, dtype=float)
    out = np.empty((len(times),) + x.shape)
    out[0] = x
    dt = times[1] - times[0] if len(times) > 1 else 0.0
    for k in range(1, len(times)):
        x = rk4_step(field, x, times[k - 1], dt)
        if check and not (
            np.all(np.isfinite(x)) and np.linalg.norm(x, axis=-1).max(initial=0.0) <= DIVERGENCE_NORM
        ):
            raise DivergenceError(k)
        out[k] = x
    return out


def integrate(sys: SystemSpec, x0, t_final: float, dt: float) -> Trajectory:
    """Integrate ``sys`` from ``x0`` on the grid ``{0, dt, ..., t_final}``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if t_final < dt:
        raise ValueError("t_final must be at least dt")
    x0 = np.asarray(x0, dtype=float)
    _check_dim(sys, x0)
    times = time_grid(t_final, dt)
    states = rk4_rollout(sys.field, x0, times)
    return Trajectory(times, states)


def integrate_batch(sys: SystemSpec, x0s, t_final: float, dt: float):
    """Integrate many initial conditions at once.

    Returns ``(times, states)`` with ``states`` of shape ``(n, len(times), p)``.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    _check_dim(sys, x0s)
    times = time_grid(t_final, dt)
    states = rk4_rollout(sys.field, x0s, times)
    return times, np.swapaxes(states, 0, 1)
