import csv
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from certkit.datagen import SampleRegion, generate_pairs
from certkit.dynamics import make_builtin
from certkit.globalcert import (GlobalConstants, GridSpec, KLFunctionSpec, comparison_envelope,
                                decrease_outside_ball, estimate_constants, fit_kl_function,
                                grid_violation, hessian_norm, known_dynamics_eps,
                                lyap_ball_radius, metric_ball_radius, r_eps_ball, r_eps_sphere,
                                shrink_region, spherical_cap, unit_ball_volume)
from certkit.models import PolynomialMetric, QuadraticLyapunov
from certkit.statbounds import ContractionRate, LyapContinuous, MetricDiffLyap


def consts(**kw):
    base = dict(B_gradV=2.0, B_gradq=3.0, B_H=0.5, mu=1.0, lam=0.5, eta=0.5, m=1.0, L=2.0)
    base.update(kw)
    return GlobalConstants(**base)


# -- grid ---------------------------------------------------------------------------

def test_grid_points_and_validation():
    g = GridSpec([[-1, 1], [0, 2]], [3, 5])
    P = g.points()
    assert g.n_points == 15 and P.shape == (15, 2)
    assert P[0].tolist() == [-1, 0] and P[-1].tolist() == [1, 2]
    with pytest.raises(ValueError):
        GridSpec([[1, 1]], [3])
    with pytest.raises(ValueError):
        GridSpec([[0, 1]], [3, 3])


def test_grid_lti_oracle_has_no_violations():
    A = np.array([[0.0, 1.0], [-9.81, -2.0]])
    Q = np.eye(2)
    P = scipy.linalg.solve_continuous_lyapunov(A.T, -Q)
    rate = 0.99 * 1.0 / np.linalg.eigvalsh(P).max()
    sys = make_builtin("linear", {"A": A.tolist()})
    res = grid_violation(QuadraticLyapunov(P), sys, GridSpec([[-2, 2], [-4, 4]], [101, 101]),
                         LyapContinuous(rate))
    assert res.fraction == 0.0


def test_grid_expanding_system_violates_everywhere_but_origin():
    sys = make_builtin("linear", {"A": np.eye(2).tolist()})
    res = grid_violation(QuadraticLyapunov(np.eye(2)), sys, GridSpec([[-1, 1], [-1, 1]], [11, 11]),
                         LyapContinuous(0.0))
    assert res.mask.sum() == 120
    assert not res.mask[60]


def test_grid_constant_metric_for_contracting_linear():
    sys = make_builtin("linear", {"A": [[-1.0, 2.0], [-2.0, -1.0]]})
    grid = GridSpec([[-2, 2], [-2, 2]], [21, 21])
    M = PolynomialMetric(2, 1, 1.0)
    assert grid_violation(M, sys, grid, ContractionRate(0.99, sys)).fraction == 0.0
    assert grid_violation(M, sys, grid, ContractionRate(1.01, sys)).fraction == 1.0
    with pytest.raises(TypeError):
        grid_violation(M, sys, grid, MetricDiffLyap(1.0))


def test_grid_csv(tmp_path):
    sys = make_builtin("linear", {"A": np.eye(2).tolist()})
    res = grid_violation(QuadraticLyapunov(np.eye(2)), sys, GridSpec([[-1, 1], [-1, 1]], [3, 3]),
                         LyapContinuous(0.0))
    res.to_csv(tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["x1", "x2", "residual", "violates"]
    assert len(rows) == 10
    assert float(rows[1][2]) == pytest.approx(4.0) and rows[1][3] == "1"
    assert rows[5][3] == "0"


# -- r(eps) and caps ----------------------------------------------------------------

def test_r_eps_ball_examples():
    assert r_eps_ball(0.0, 16.0, 2) == 0.0
    assert r_eps_ball(1.0, unit_ball_volume(3), 3) == pytest.approx(1.0)
    assert r_eps_ball(0.1, 16.0, 2) == pytest.approx(math.sqrt(1.6 / math.pi), rel=1e-12)
    assert r_eps_ball(0.1, 16.0, 2) == pytest.approx(0.7136, abs=1e-4)


@given(st.floats(0.0, 0.99), st.floats(0.001, 0.01), st.integers(1, 8))
def test_r_eps_ball_increasing(eps, step, p):
    assert r_eps_ball(eps + step, 10.0, p) > r_eps_ball(eps, 10.0, p)


def test_unit_ball_volumes():
    assert unit_ball_volume(1) == pytest.approx(2.0)
    assert unit_ball_volume(2) == pytest.approx(math.pi)
    assert unit_ball_volume(3) == pytest.approx(4 * math.pi / 3)


@pytest.mark.parametrize("p", [2, 3, 4, 6, 9])
def test_cap_hemisphere_and_full(p):
    assert spherical_cap(math.pi / 2, p) == pytest.approx(0.5, abs=1e-14)
    assert spherical_cap(0.0, p) == 0.0
    assert spherical_cap(math.pi, p) == 1.0
    assert spherical_cap(4.0, p) == 1.0


def test_cap_arc_fraction_on_circle():
    for r in np.linspace(0, math.pi, 37)[:-1]:
        assert spherical_cap(r, 2) == pytest.approx(r / math.pi, abs=1e-12)


@given(st.floats(0, math.pi), st.floats(0, math.pi), st.integers(2, 10))
def test_cap_nondecreasing(r1, r2, p):
    lo, hi = sorted((r1, r2))
    assert spherical_cap(lo, p) <= spherical_cap(hi, p) + 1e-14


@pytest.mark.parametrize("p", [2, 3, 6])
def test_cap_monte_carlo(p):
    rng = np.random.default_rng(p)
    n = 1_000_000
    Z = rng.standard_normal((n, p))
    cosang = Z[:, 0] / np.linalg.norm(Z, axis=1)
    for r in (0.3, 1.0, 2.0, 2.8):
        frac = np.mean(cosang >= math.cos(r))
        zeta = spherical_cap(r, p)
        se = math.sqrt(zeta * (1 - zeta) / n)
        assert abs(frac - zeta) <= 3 * se


def test_r_eps_sphere_solves_defining_equation():
    for eps, p in [(0.01, 2), (0.1, 3), (0.5, 6), (1e-4, 6)]:
        vol = 20.0
        r = r_eps_sphere(eps, vol, p)
        target = eps * vol / unit_ball_volume(p)
        assert r**p * spherical_cap(r, p) == pytest.approx(target, abs=1e-10, rel=1e-10)
    assert r_eps_sphere(0.0, 5.0, 3) == 0.0


@given(st.floats(1e-4, 1.0), st.integers(2, 8))
def test_r_eps_sphere_dominates_ball(eps, p):
    assert r_eps_sphere(eps, 7.0, p) >= r_eps_ball(eps, 7.0, p) * (1 - 1e-12)


# -- exclusion balls ---------------------------------------------------------------

def test_lyap_radius_formula_and_edge_cases():
    c = consts()
    beta = KLFunctionSpec(2.0, 1.0)
    expected = math.sqrt(2.0 * 0.3 * (2.0 + 3.0 / 0.5) / (0.5 * 1.0))
    assert lyap_ball_radius(c, beta, 0.3) == pytest.approx(expected)
    assert lyap_ball_radius(c, beta, 0.0) == 0.0
    ratio = lyap_ball_radius(c, KLFunctionSpec(4.0, 1.0), 0.3) / lyap_ball_radius(c, beta, 0.3)
    assert ratio == pytest.approx(math.sqrt(2))


def test_metric_radius_formula_and_edge_cases():
    c = consts()
    expected = math.sqrt(0.2 * 0.5 * (3.0 + 0.5 * 2.0) * 2.0**1.5 / (0.5 * 0.5 * 1.0))
    assert metric_ball_radius(c, 0.2) == pytest.approx(expected)
    assert metric_ball_radius(c, 0.0) == 0.0
    assert metric_ball_radius(consts(B_H=0.0), 0.2) == 0.0
    scaled = metric_ball_radius(consts(L=8.0), 0.2) / metric_ball_radius(c, 0.2)
    assert scaled == pytest.approx(4 ** 0.75)
    assert scaled == pytest.approx(2.828, abs=1e-3)
    assert metric_ball_radius(c, 0.2, conservative=True) == pytest.approx(2 ** 0.25 * expected)
    with pytest.raises(ValueError):
        metric_ball_radius(consts(m=None), 0.2)


pos = st.floats(0.01, 10.0)


@given(pos, pos, pos, pos, pos, st.floats(0.05, 0.95), pos, st.floats(1.01, 3.0))
def test_radii_monotone(bv, bq, bh, mu, r, eta, lam, f):
    c = GlobalConstants(bv, bq, bh, mu, lam, eta, m=mu, L=mu * 2)
    beta = KLFunctionSpec(1.5, 0.5)
    for fn in (lambda cc, rr: lyap_ball_radius(cc, beta, rr), metric_ball_radius):
        base = fn(c, r)
        assert fn(c, r * f) >= base
        for name in ("B_gradV", "B_gradq", "B_H"):
            assert fn(GlobalConstants(**{**c.to_dict(), name: getattr(c, name) * f}), r) >= base * (1 - 1e-12)
        assert fn(GlobalConstants(**{**c.to_dict(), "mu": mu * f}), r) <= base * (1 + 1e-12)
        eta2 = min(eta * f, 0.99)
        assert fn(GlobalConstants(**{**c.to_dict(), "eta": eta2}), r) <= base * (1 + 1e-12)


def test_constants_validation_and_inflation():
    with pytest.raises(ValueError):
        consts(eta=1.0)
    with pytest.raises(ValueError):
        consts(m=3.0, L=2.0)
    inf = consts().inflated(1.5)
    assert inf.B_gradV == 3.0 and inf.mu == pytest.approx(1 / 1.5) and inf.L == 3.0
    assert inf.inflation == 1.5


# -- constant estimation -------------------------------------------------------------

def test_gradient_bound_for_squared_norm_on_unit_ball():
    sys = make_builtin("linear", {"A": (-np.eye(2)).tolist()})
    c = estimate_constants(QuadraticLyapunov(np.eye(2)), sys, SampleRegion.ball(np.zeros(2), 1.0),
                           n_probe=10_000, seed=0)
    assert 1.9 <= c.B_gradV <= 2.0
    assert c.mu == pytest.approx(1.0)
    # q = -2|x|^2 so |grad q| = 4|x|
    assert 3.8 <= c.B_gradq <= 4.0 + 1e-6
    assert c.B_H == 0.0
    assert c.n_probe == 10_000


def test_constant_metric_eigen_bounds():
    sys = make_builtin("linear", {"A": [[-1.0, 0.0], [0.0, -2.0]]})
    c = estimate_constants(PolynomialMetric(2, 2, 3.0), sys, SampleRegion.ball(np.zeros(2), 1.0),
                           n_probe=500)
    assert c.m == 3.0 and c.L == 3.0 and c.B_H == 0.0


def test_hessian_bound_nonzero_for_nonlinear_system():
    sys = make_builtin("vdp")
    H = hessian_norm(sys, np.array([[1.0, 2.0]]))
    # d2f2/dx1^2 = -2 x2, d2f2/dx1dx2 = -2 x1 (twice, symmetric)
    assert H[0] == pytest.approx(math.sqrt(4 * 4 + 2 * 4), rel=1e-6)


# -- comparison envelope ----------------------------------------------------------

def test_envelope_homogeneous_decay():
    t = np.linspace(0, 5, 501)
    u = comparison_envelope(3.0, 0.7, consts(), KLFunctionSpec(2.0, 1.0), 0.0, t)
    assert np.abs(u - 3.0 * np.exp(-0.7 * t)).max() < 1e-10


@pytest.mark.parametrize("alpha,lam", [(1.3, 0.5), (0.2, 0.9)])
def test_envelope_closed_form(alpha, lam):
    c, beta, r = consts(lam=lam), KLFunctionSpec(2.5, alpha), 0.4
    t = np.linspace(0, 8, 801)
    u = comparison_envelope(1.5, lam, c, beta, r, t)
    k = (c.B_gradq + lam * c.B_gradV) * beta.M * r
    exact = 1.5 * np.exp(-lam * t) + k * (np.exp(-lam * t) - np.exp(-alpha * t)) / (alpha - lam)
    assert np.abs(u - exact).max() < 1e-8


def test_envelope_needs_uniform_grid():
    with pytest.raises(ValueError):
        comparison_envelope(1.0, 1.0, consts(), KLFunctionSpec(), 0.1, [0, 0.1, 0.3])


# -- known dynamics ---------------------------------------------------------------

ONES_L = {"L_M": 1, "L_gradM": 1, "L_J": 1, "L_f": 1}
ONES_B = {"B_M": 1, "B_gradM": 1, "B_J": 1, "B_f": 1}


def test_known_dynamics_example():
    assert math.gamma(2) == 1
    assert known_dynamics_eps(1, 1, 2, ONES_L, ONES_B, 2, math.pi) == pytest.approx(0.015625)


def test_known_dynamics_limits():
    assert known_dynamics_eps(1, 1, 1 + 1e-9, ONES_L, ONES_B, 2, math.pi) < 1e-15
    a = known_dynamics_eps(1, 1, 2, ONES_L, ONES_B, 3, 2.0)
    assert known_dynamics_eps(1, 1, 2, ONES_L, ONES_B, 3, 4.0) == pytest.approx(a / 2)
    with pytest.raises(ValueError):
        known_dynamics_eps(1, 1, 1.0, ONES_L, ONES_B, 2, 1.0)


# -- KL fit and shrinking ----------------------------------------------------------

def test_kl_fit_on_linear_decay():
    sys = make_builtin("linear", {"A": [[-0.8, 0.0], [0.0, -0.8]]})
    ds = generate_pairs(sys, SampleRegion.box([-1, -1], [1, 1]), 20, 5e-3, 5e-3, 2.0, 0.01, 0)
    beta = fit_kl_function(ds)
    assert beta.alpha == pytest.approx(0.8, rel=1e-3)
    assert beta.M == pytest.approx(1.0, abs=1e-3)
    norms = np.linalg.norm(ds.delta, axis=-1)
    assert np.all(norms <= beta(norms[:, :1], ds.times) * (1 + 1e-12))


def test_kl_spec_validation():
    with pytest.raises(ValueError):
        KLFunctionSpec(0.5, 1.0)
    assert KLFunctionSpec(2.0, 1.0)(0.0, 3.0) == 0.0


def test_shrink_region():
    inner = shrink_region(SampleRegion.box([-2, -4], [2, 4]), 0.5)
    assert np.allclose(inner.extent, [1.5, 3.5])
    with pytest.raises(ValueError):
        shrink_region(SampleRegion.ball(np.zeros(2), 1.0), 1.0)


def test_decrease_outside_ball_on_stable_system():
    sys = make_builtin("linear", {"A": (-np.eye(2)).tolist()})
    starts = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    checked, bad = decrease_outside_ball(QuadraticLyapunov(np.eye(2)), sys, starts, 1.0, 0.1,
                                         1.0, 0.5, 0.0)
    assert checked == 110 and bad == 0
    assert decrease_outside_ball(QuadraticLyapunov(np.eye(2)), sys, starts, 1.0, 0.1, 1.0, 0.5,
                                 10.0) == (0, 0)
    # a certificate that grows along the flow fails everywhere
    checked, bad = decrease_outside_ball(QuadraticLyapunov(np.eye(2)),
                                         make_builtin("linear", {"A": np.eye(2).tolist()}),
                                         starts, 1.0, 0.1, 1.0, 0.5, 0.0)
    assert bad == checked
