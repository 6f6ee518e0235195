"""Builders and per-seed pipelines driven by a resolved configuration dict."""
from __future__ import annotations

import numpy as np

from .adaptive import DisturbanceSpec, simulate_adaptive
from .datagen import SampleRegion, generate_pairs, generate_trajectories
from .dynamics import make_builtin, rk4_rollout, time_grid
from .globalcert import (GridSpec, comparison_envelope, decrease_outside_ball, estimate_constants,
                         fit_kl_function, grid_violation, lyap_ball_radius, metric_ball_radius,
                         r_eps_ball, r_eps_sphere, shrink_region)
from .models import (FactoredMetric, NeuralLyapunov, PolynomialMetric, QuadraticLyapunov,
                     RandomFeatureCertificate)
from .statbounds import (ContractionRate, LyapContinuous, LyapDiscrete, MetricDiffLyap,
                         chernoff_bound, empirical_violation, rcp_bound)
from .training import (MarginSpec, TrainConfig, lyapunov_loss_continuous, lyapunov_loss_discrete,
                       metric_loss, train)


def build_system(cfg):
    return make_builtin(cfg["system"]["name"], cfg["system"].get("params") or {})


def build_region(cfg) -> SampleRegion:
    r = cfg["region"]
    return SampleRegion(r["kind"], r["center"], r["extent"])


def build_model(cfg, seed):
    m, p = cfg["model"], build_system(cfg).state_dim
    kind = m["kind"]
    if kind == "neural_lyapunov":
        return NeuralLyapunov(p, m["hidden"], seed)
    if kind == "random_features":
        return RandomFeatureCertificate(p, m["n_features"], m["bandwidth"], m["budget"], seed)
    if kind == "quadratic":
        return QuadraticLyapunov(np.eye(p))
    if kind == "polynomial_metric":
        return PolynomialMetric(p, m["degree"], m["mu"], seed)
    if kind == "factored_metric":
        return FactoredMetric(p, m["degree"], m["mu"], seed, rank=m.get("rank"))
    raise ValueError(f"unknown model kind {kind!r}")


def generate(cfg, seed, n=None):
    """Training data for ``seed`` (pass ``seed + test_seed_offset`` for test data)."""
    d = cfg["data"]
    sys, region = build_system(cfg), build_region(cfg)
    n = d["n_train"] if n is None else n
    if d["paired"]:
        return generate_pairs(sys, region, n, d["eps_pert"], d["overshoot"], d["horizon"], d["dt"],
                              seed, d["method"], d["window"], d["polyorder"])
    return generate_trajectories(sys, region, n, d["horizon"], d["dt"], seed, d["method"],
                                 d["window"], d["polyorder"], d["wrap_angle"])


def test_data(cfg, seed):
    return generate(cfg, seed + cfg["test_seed_offset"], cfg["data"]["n_test"])


def build_loss(cfg, model, ds, seed):
    lc, reg = cfg["loss"], cfg["train"]["reg"]
    kind = lc["type"]
    if kind == "lyap_continuous":
        spec = MarginSpec(margin=lc["margin"], rate=lc["rate"])
        return lyapunov_loss_continuous(model, ds, spec, reg, lc["constraints_per_traj"])
    if kind == "lyap_discrete":
        return lyapunov_loss_discrete(model, ds, lc["rho"], lc["slack"], reg)
    if kind == "metric":
        return metric_loss(model, ds, lc["rate"], lc["mu"], reg, lc["probe_count"],
                           lc["constraints_per_traj"], seed)
    raise ValueError(f"unknown loss type {kind!r}")


def fit(cfg, ds, seed, callback=None):
    model = build_model(cfg, seed)
    loss = build_loss(cfg, model, ds, seed)
    t = cfg["train"]
    tc = TrainConfig(t["epochs"], t["lr"], t["batch_size"], t["reg"], t["schedule"], seed)
    return train(model, loss, tc, callback)


def conditions(cfg):
    """Named certificate conditions evaluated on held-out data."""
    lc = cfg["loss"]
    kind = lc["type"]
    if kind == "lyap_continuous":
        return {"lyap": LyapContinuous(lc["rate"])}
    if kind == "lyap_discrete":
        return {"lyap_discrete": LyapDiscrete(lc["rho"], lc["slack"])}
    factor = cfg["eval"]["contraction_factor"]
    # differential-Lyapunov rate r corresponds to J^T M + M J + Mdot <= -r M
    return {"diff_lyap": MetricDiffLyap(lc["rate"]),
            "contraction": ContractionRate(factor * lc["rate"] / 2.0, build_system(cfg))}


# certificates linear in their parameters, for which the RCP bound is reported
LINEAR_KINDS = ("quadratic", "random_features", "polynomial_metric")


def evaluate(cfg, model, test):
    """Violation counts and test-set UCBs for every condition of the recipe.

    The randomized-convex-program bound is added for certificates linear in
    their parameters; its ``valid`` flag records that the bound presumes an
    exactly solved convex program.
    """
    out = {}
    delta = cfg["bounds"]["delta"]
    for name, cond in conditions(cfg).items():
        rep = empirical_violation(model, test, cond, cfg["eval"]["constraints_per_traj"])
        viol = rep.to_dict()
        del viol["worst_residual"]
        out[name] = {"violation": viol, "bound": chernoff_bound(rep.k, rep.n, delta).to_dict()}
    if model.kind in LINEAR_KINDS or cfg["bounds"]["method"] == "rcp":
        out["rcp"] = rcp_bound(cfg["data"]["n_train"], model.n_params, delta,
                               convex=model.kind in LINEAR_KINDS).to_dict()
    return out


def grid_condition(cfg):
    lc, g = cfg["loss"], cfg["grid"]
    if lc["type"] == "metric":
        return ContractionRate(g["eta"] * lc["rate"] / 2.0, build_system(cfg))
    return LyapContinuous(lc["rate"])


def grid_spec(cfg) -> GridSpec:
    g = cfg["grid"]
    if g is None:
        raise ValueError("this recipe has no grid section")
    return GridSpec(g["box"], g["resolution"])


def run_grid(cfg, model):
    return grid_violation(model, build_system(cfg), grid_spec(cfg), grid_condition(cfg))


def radius_analysis(cfg, model, eps, seed=0):
    """Exclusion-ball radius and comparison-envelope check for a learned certificate.

    ``eps`` is a bound on the violation probability.  Returns a JSON-ready
    dict with raw and inflated constants, ``r(eps)``, ``r_b`` and, for scalar
    certificates, the end-to-end checks on flows from the shrunken region.
    """
    c = cfg["constants"]
    sys, region = build_system(cfg), build_region(cfg)
    p = sys.state_dim
    lam = c["lam"] if c["lam"] is not None else cfg["loss"]["rate"]
    rng = np.random.default_rng(seed)
    out = {"eps": eps, "lam": lam, "eta": c["eta"], "inflation": c["inflation"]}
    d = cfg["data"]
    times = time_grid(d["horizon"], d["dt"])
    if not model.is_metric:
        r = r_eps_ball(eps, region.volume, p)
        if r >= region.extent.min():
            out.update(r_eps=r, r_b=None, vacuous=True)
            return out
        inner = shrink_region(region, r)
        starts = inner.draw(rng, c["n_starts"])
        S = rk4_rollout(sys.field, starts, times).reshape(-1, p)
        raw = estimate_constants(model, sys, points=S, n_probe=c["n_probe"], seed=seed, lam=lam,
                                 eta=c["eta"])
        consts = raw.inflated(c["inflation"])
        pairs = generate_pairs(sys, region, c["kl_pairs"], d["eps_pert"], c["kl_overshoot"],
                               d["horizon"], d["dt"], seed + 1)
        beta = fit_kl_function(pairs)
        rb = lyap_ball_radius(consts, beta, r)
        checked, bad = decrease_outside_ball(model, sys, starts, d["horizon"], d["dt"], lam, c["eta"], rb)
        # comparison envelope on fresh flows from the shrunken region
        xi = inner.draw(rng, c["n_envelope"])
        traj = rk4_rollout(sys.field, xi, times)
        Vt = model.value(traj.reshape(-1, p)).reshape(len(times), -1)
        env = np.stack([comparison_envelope(v0, lam, consts, beta, r, times) for v0 in Vt[0]], axis=1)
        out.update(
            r_eps=r, r_b=rb, kl={"M": beta.M, "alpha": float(beta.alpha)},
            constants_raw=raw.to_dict(), constants=consts.to_dict(),
            sup_state_norm=float(np.linalg.norm(S, axis=1).max()),
            ball_covers_flows=bool(rb >= np.linalg.norm(S, axis=1).max()),
            decrease_checked=checked, decrease_violations=bad,
            envelope_trajectories=int(Vt.shape[1]),
            envelope_violations=int(np.sum(np.any(Vt > env * (1 + 1e-9), axis=0))),
        )
        return out
    r = r_eps_sphere(eps, region.volume, p)
    raw = estimate_constants(model, sys, region, n_probe=c["n_probe"], seed=seed, lam=lam, eta=c["eta"])
    consts = raw.inflated(c["inflation"])
    out.update(r_eps=r, r_b=metric_ball_radius(consts, r, c["conservative"]),
               constants_raw=raw.to_dict(), constants=consts.to_dict())
    return out


def adaptive_runs(cfg, model, seed):
    """Adaptive and unadapted closed loops for every kappa; returns results keyed by kappa."""
    a = cfg["adapt"]
    out = {}
    for kappa in a["kappa"]:
        dist = DisturbanceSpec.draw(seed, kappa)
        kw = dict(x0=a["x0"], t_final=a["t_final"], dt=a["dt"], gain=a["gain"],
                  params=cfg["system"].get("params") or {})
        out[float(kappa)] = (simulate_adaptive(model, dist, adapt=True, **kw),
                             simulate_adaptive(model, dist, adapt=False, **kw))
    return out
