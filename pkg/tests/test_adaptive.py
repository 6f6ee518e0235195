import csv

import numpy as np
import pytest
import scipy.linalg

from certkit.adaptive import (N_HARMONICS, DisturbanceSpec, ideal_oracle_run, simulate_adaptive)
from certkit.dynamics import PENDULUM_DEFAULTS, integrate, make_builtin
from certkit.models import QuadraticLyapunov


def linearized_oracle_V(params=PENDULUM_DEFAULTS):
    inertia = params["m"] * params["l"] ** 2
    A = np.array([[0.0, 1.0], [-params["g"] / params["l"], -params["b"] / inertia]])
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -np.eye(2))
    return QuadraticLyapunov(P)


def test_disturbance_draw():
    d = DisturbanceSpec.draw(3, kappa=6.0)
    assert d.a.shape == (N_HARMONICS,) and d.kappa == 6.0
    assert np.all((d.omega >= 0) & (d.omega < 2 * np.pi))
    again = DisturbanceSpec.draw(3, kappa=6.0)
    assert np.array_equal(d.a, again.a) and np.array_equal(d.omega, again.omega)
    assert d(0.7) == pytest.approx(6.0 * d.a @ np.sin(d.omega * 0.7))
    with pytest.raises(ValueError):
        DisturbanceSpec(np.zeros(3), np.zeros(3))


def test_no_forcing_and_no_gain_keeps_estimate_zero():
    dist = DisturbanceSpec.draw(0, kappa=0.0)
    res = simulate_adaptive(linearized_oracle_V(), dist, t_final=5.0, dt=0.01, gain=0.0)
    assert np.array_equal(res.a_hat, np.zeros_like(res.a_hat))
    ref = integrate(make_builtin("pendulum"), [2.0, 0.0], 5.0, 0.01)
    assert np.abs(res.trajectory.states - ref.states).max() < 1e-12


def test_oracle_cancellation_matches_unforced_pendulum():
    dist = DisturbanceSpec.draw(1, kappa=10.0)
    res = ideal_oracle_run(dist, (2.0, 0.0), 10.0, 0.01)
    ref = integrate(make_builtin("pendulum"), [2.0, 0.0], 10.0, 0.01)
    assert np.abs(res.trajectory.states - ref.states).max() < 1e-12
    assert np.array_equal(res.estimation_error, np.zeros(len(ref.times)))


def test_oracle_decays_from_unit_angle():
    res = ideal_oracle_run(DisturbanceSpec.draw(0), (1.0, 0.0), 40.0, 0.01)
    assert res.terminal_norm() < 1e-3


@pytest.mark.parametrize("kappa", [1.0, 6.0, 10.0])
def test_augmented_value_nonincreasing_with_oracle_certificate(kappa):
    V = linearized_oracle_V()
    res = simulate_adaptive(V, DisturbanceSpec.draw(2, kappa), (1.0, 0.5), 20.0, 0.01,
                            gain=15.0, linearized=True)
    Vbar = res.augmented_value(V)
    assert np.diff(Vbar).max() <= 1e-6


def test_adaptive_beats_open_loop_and_respects_oracle():
    V = linearized_oracle_V()
    dist = DisturbanceSpec.draw(4, 10.0)
    ad = simulate_adaptive(V, dist, t_final=40.0, dt=0.01)
    op = simulate_adaptive(V, dist, t_final=40.0, dt=0.01, adapt=False)
    orc = ideal_oracle_run(dist, (2.0, 0.0), 40.0, 0.01)
    assert np.array_equal(op.a_hat, np.zeros_like(op.a_hat))
    assert np.array_equal(op.u, np.zeros_like(op.u))
    assert op.sup_norm() > ad.sup_norm()
    assert ad.terminal_norm() >= orc.terminal_norm()
    assert ad.terminal_norm() < 0.5


def test_control_signal_matches_estimate():
    V = linearized_oracle_V()
    dist = DisturbanceSpec.draw(5, 6.0)
    res = simulate_adaptive(V, dist, t_final=2.0, dt=0.01)
    k = 37
    assert res.u[k] == pytest.approx(6.0 * res.a_hat[k] @ dist.phi(res.trajectory.times[k]))


def test_simulation_deterministic():
    V = linearized_oracle_V()
    a = simulate_adaptive(V, DisturbanceSpec.draw(7, 6.0), t_final=3.0)
    b = simulate_adaptive(V, DisturbanceSpec.draw(7, 6.0), t_final=3.0)
    assert np.array_equal(a.trajectory.states, b.trajectory.states)
    assert np.array_equal(a.a_hat, b.a_hat)


def test_negative_gain_rejected():
    with pytest.raises(ValueError):
        simulate_adaptive(linearized_oracle_V(), DisturbanceSpec.draw(0), gain=-1.0)


def test_csv_columns(tmp_path):
    res = simulate_adaptive(linearized_oracle_V(), DisturbanceSpec.draw(0), t_final=1.0, dt=0.1)
    res.to_csv(tmp_path / "run.csv")
    rows = list(csv.reader(open(tmp_path / "run.csv")))
    assert rows[0] == ["t", "theta", "theta_dot", "u", "a_err"]
    assert len(rows) == 12
    assert float(rows[1][0]) == 0.0 and float(rows[1][1]) == 2.0
    assert float(rows[1][4]) == pytest.approx(np.linalg.norm(DisturbanceSpec.draw(0).a))
