"""Experiment configuration: recipe defaults, schema validation, dotted overrides."""
from __future__ import annotations

import copy
import json
from numbers import Number

# keys below these paths are free-form and not checked against the schema
FREE_FORM = {("system", "params")}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted key path at fault."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


BASE = {
    "recipe": "pendulum",
    "seed": 0,
    "seeds": list(range(10)),
    "test_seed_offset": 10000,
    "system": {"name": "pendulum", "params": {}},
    "region": {"kind": "box", "center": [0.0, 0.0], "extent": [2.0, 2.0]},
    "data": {
        "n_train": 1000, "n_test": 1000, "horizon": 8.0, "dt": 0.02,
        "method": "savgol", "window": 5, "polyorder": 2, "wrap_angle": False,
        "paired": False, "eps_pert": 5e-3, "overshoot": 1e-2,
    },
    "model": {
        "kind": "neural_lyapunov", "hidden": 30, "degree": 2, "mu": 1.0, "rank": None,
        "n_features": 200, "bandwidth": 1.0, "budget": 100.0,
    },
    "loss": {
        "type": "lyap_continuous", "rate": 0.01, "margin": 0.0, "rho": 0.945, "slack": 0.025,
        "mu": 1.0, "probe_count": 2, "constraints_per_traj": 40,
    },
    "train": {"epochs": 1000, "lr": 1e-3, "batch_size": 1000, "reg": 0.1, "schedule": "constant"},
    "eval": {"constraints_per_traj": None, "contraction_factor": 0.99},
    "bounds": {"delta": 0.01, "method": "chernoff"},
    "grid": {"box": [[-2.0, 2.0], [-4.0, 4.0]], "resolution": [200, 200], "eta": 1.0},
    "constants": {
        "n_probe": 20000, "inflation": 1.5, "eta": 0.5, "lam": None, "n_starts": 400,
        "kl_pairs": 200, "kl_overshoot": 1.0, "conservative": False, "n_envelope": 100,
    },
    "adapt": {"kappa": [1.0, 6.0, 10.0], "gain": 15.0, "x0": [2.0, 0.0], "t_final": 40.0, "dt": 0.01},
}

_OVERRIDES = {
    "pendulum": {"seeds": list(range(30))},
    "pendulum-adaptive": {"seeds": list(range(10))},
    "vdp": {
        "system": {"name": "vdp", "params": {}},
        "region": {"kind": "ball", "center": [0.0, 0.0], "extent": [2.0]},
        "data": {"n_train": 400, "n_test": 1000, "horizon": 3.0, "dt": 5e-3, "method": "spline",
                 "paired": True},
        "model": {"kind": "polynomial_metric", "degree": 4, "mu": 1.0},
        "loss": {"type": "metric", "rate": 0.75, "mu": 1.0, "constraints_per_traj": 50},
        "train": {"epochs": 200, "lr": 1e-2, "reg": 1e-4},
        "eval": {"constraints_per_traj": 50},
        "grid": {"box": [[-2.0, 2.0], [-2.0, 2.0]], "resolution": [300, 300], "eta": 1.0},
        "seeds": [0, 1, 2],
    },
    "gradflow6d": {
        "system": {"name": "gradflow6d", "params": {}},
        "region": {"kind": "ball", "center": [0.0] * 6, "extent": [3.0]},
        "data": {"n_train": 4000, "n_test": 1000, "horizon": 2.0, "dt": 5e-3, "method": "spline",
                 "paired": True},
        "model": {"kind": "factored_metric", "degree": 1, "mu": 1.0, "rank": 42},
        "loss": {"type": "metric", "rate": 4.0, "mu": 1.0, "constraints_per_traj": 25},
        "train": {"epochs": 8, "lr": 1e-2, "reg": 1e-4},
        "eval": {"constraints_per_traj": 25},
        "grid": None,
        "seeds": [0, 1, 2, 3, 4],
    },
}

RECIPES = tuple(_OVERRIDES)


def _merge(base, over, path=()):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def recipe_defaults(name: str) -> dict:
    if name not in _OVERRIDES:
        raise ConfigError("recipe", f"unknown recipe {name!r}; choose from {list(RECIPES)}")
    cfg = _merge(BASE, _OVERRIDES[name])
    cfg["recipe"] = name
    return cfg


def _check(user, schema, path=()):
    for key, val in user.items():
        here = path + (key,)
        dotted = ".".join(here)
        if here[:-1] in FREE_FORM or path in FREE_FORM:
            continue
        if key not in schema:
            raise ConfigError(dotted, f"unknown key {key!r}")
        ref = schema[key]
        if here in FREE_FORM:
            if not isinstance(val, dict):
                raise ConfigError(dotted, "expected an object")
            continue
        if isinstance(ref, dict):
            if val is None:
                continue
            if not isinstance(val, dict):
                raise ConfigError(dotted, "expected an object")
            _check(val, ref, here)
        elif ref is None or val is None:
            continue
        elif isinstance(ref, bool):
            if not isinstance(val, bool):
                raise ConfigError(dotted, "expected a boolean")
        elif isinstance(ref, Number):
            if isinstance(val, bool) or not isinstance(val, Number):
                raise ConfigError(dotted, "expected a number")
        elif isinstance(ref, str):
            if not isinstance(val, str):
                raise ConfigError(dotted, "expected a string")
        elif isinstance(ref, list):
            if not isinstance(val, list):
                raise ConfigError(dotted, "expected a list")


# every recipe carries the same key tree
SCHEMA = BASE


def resolve(user: dict | None = None, overrides=()) -> dict:
    """Validate ``user`` against the schema and merge it over its recipe defaults.

    ``overrides`` are ``key.path=value`` strings; values parse as JSON when
    possible and as plain strings otherwise.
    """
    user = copy.deepcopy(user or {})
    for item in overrides:
        set_dotted(user, item)
    if not isinstance(user, dict):
        raise ConfigError("", "configuration must be a JSON object")
    _check(user, SCHEMA)
    cfg = recipe_defaults(user.get("recipe", "pendulum"))
    cfg = _merge(cfg, user)
    if cfg.get("grid") is not None and set(cfg["grid"]) != set(BASE["grid"]):
        cfg["grid"] = _merge(BASE["grid"], cfg["grid"])
    return cfg


def set_dotted(cfg: dict, item: str):
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    path, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.strip().split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(path, "cannot descend into a non-object")
    node[keys[-1]] = value


def load(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("", f"{path}: configuration must be a JSON object")
    return data
