"""Command-line entry point: ``certkit <subcommand> [options]``.

Exit codes: 0 on success, 1 on invalid configuration or input, 2 on a
numerical failure (divergence, non-finite loss, pair rejection).
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

from . import config as cfgmod
from . import experiments as ex
from . import jsonio
from .datagen import AcceptanceError, FormatError, load_dataset, save_dataset
from .dynamics import DivergenceError
from .models import load_model, save_model
from .statbounds import chernoff_ucb, percentiles
from .training import TrainingError

NUMERIC_ERRORS = (DivergenceError, TrainingError, AcceptanceError, FloatingPointError)


def _outdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _echo_config(cfg, out):
    jsonio.dump(cfg, os.path.join(out, "config.json"))


def _report_dict(report):
    return {"final_loss": report.final_loss, "loss_curve": report.loss_curve,
            "n_positive": report.n_positive, "adam": report.adam}


# -- single-step subcommands ------------------------------------------------------

def cmd_generate(cfg, out):
    out = _outdir(out)
    seed = cfg["seed"]
    save_dataset(ex.generate(cfg, seed), os.path.join(out, "train.ds"))
    save_dataset(ex.test_data(cfg, seed), os.path.join(out, "test.ds"))
    _echo_config(cfg, out)


def cmd_train(cfg, data, out):
    out = _outdir(out)
    ds = load_dataset(data)
    model, report = ex.fit(cfg, ds, cfg["seed"])
    save_model(model, os.path.join(out, "model.ckpt"))
    jsonio.dump(_report_dict(report), os.path.join(out, "train_report.json"))
    jsonio.dump({"wall_time": report.wall_time}, os.path.join(out, "timing.json"))
    _echo_config(cfg, out)


def cmd_eval(cfg, model_path, data, out):
    out = _outdir(out)
    result = ex.evaluate(cfg, load_model(model_path), load_dataset(data))
    jsonio.dump(result, os.path.join(out, "eval.json"))
    _echo_config(cfg, out)
    return result


def cmd_grid(cfg, model_path, out):
    out = _outdir(out)
    res = ex.run_grid(cfg, load_model(model_path))
    res.to_csv(os.path.join(out, "grid.csv"))
    jsonio.dump({"n_points": len(res.points), "n_violating": int(res.mask.sum()),
                 "fraction": res.fraction, "condition": ex.grid_condition(cfg).describe()},
                os.path.join(out, "grid_summary.json"))
    _echo_config(cfg, out)
    return res


def cmd_radius(cfg, model_path, data, out):
    out = _outdir(out)
    model = load_model(model_path)
    ev = ex.evaluate(cfg, model, load_dataset(data))
    first = next(iter(ev.values()))
    result = ex.radius_analysis(cfg, model, first["bound"]["eps"], cfg["seed"])
    jsonio.dump(result, os.path.join(out, "radius.json"))
    _echo_config(cfg, out)
    return result


def _adapt_summary(runs, out, seed):
    rows = []
    for kappa, (ad, op) in runs.items():
        tag = f"kappa{kappa:g}_seed{seed}"
        ad.to_csv(os.path.join(out, f"adapt_{tag}.csv"))
        op.to_csv(os.path.join(out, f"open_{tag}.csv"))
        rows.append({"kappa": kappa, "seed": seed, "terminal_norm": ad.terminal_norm(),
                     "sup_norm": ad.sup_norm(), "open_terminal_norm": op.terminal_norm(),
                     "open_sup_norm": op.sup_norm()})
    return rows


def cmd_adapt(cfg, model_path, out):
    out = _outdir(out)
    runs = ex.adaptive_runs(cfg, load_model(model_path), cfg["seed"])
    rows = _adapt_summary(runs, out, cfg["seed"])
    jsonio.dump(rows, os.path.join(out, "adapt_summary.json"))
    _echo_config(cfg, out)
    return rows


# -- reproduce ------------------------------------------------------------------------

def run_seed(cfg, seed, out):
    """Full per-seed pipeline; writes into ``out/seed_<seed>`` and returns a summary row."""
    sd = _outdir(os.path.join(out, f"seed_{seed}"))
    ds = ex.generate(cfg, seed)
    model, report = ex.fit(cfg, ds, seed)
    save_model(model, os.path.join(sd, "model.ckpt"))
    jsonio.dump(_report_dict(report), os.path.join(sd, "train_report.json"))
    row = {"seed": seed, "train_loss": report.final_loss, "train_positive": report.n_positive}
    ev = ex.evaluate(cfg, model, ex.test_data(cfg, seed))
    jsonio.dump(ev, os.path.join(sd, "eval.json"))
    for name, r in ev.items():
        if "violation" in r:
            row[f"{name}_k"] = r["violation"]["k"]
            row[f"{name}_rate"] = r["violation"]["rate"]
        row[f"{name}_ucb"] = r["bound"]["eps"] if "bound" in r else r["eps"]
    if cfg["grid"] is not None and cfg["recipe"] != "pendulum-adaptive":
        g = ex.run_grid(cfg, model)
        g.to_csv(os.path.join(sd, "grid.csv"))
        row["grid_fraction"] = g.fraction
    if cfg["recipe"] == "pendulum-adaptive":
        rows = _adapt_summary(ex.adaptive_runs(cfg, model, seed), sd, seed)
        jsonio.dump(rows, os.path.join(sd, "adapt_summary.json"))
        for r in rows:
            row[f"terminal_norm_kappa{r['kappa']:g}"] = r["terminal_norm"]
            row[f"sup_ratio_kappa{r['kappa']:g}"] = r["open_sup_norm"] / r["sup_norm"]
    return row


def cmd_reproduce(cfg, out, threads=1):
    out = _outdir(out)
    _echo_config(cfg, out)
    seeds = list(cfg["seeds"])
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_seed, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        rows = [run_seed(cfg, s, out) for s in seeds]
    keys = [k for k in rows[0] if k != "seed"]
    table = {k: percentiles([r[k] for r in rows]) for k in keys}
    jsonio.dump({"per_seed": rows, "percentiles": table}, os.path.join(out, "results.json"))
    with open(os.path.join(out, "percentiles.csv"), "w") as fh:
        fh.write("quantity,p10,p50,p90\n")
        for k, v in table.items():
            fh.write(f"{k},{v['p10']:.17g},{v['p50']:.17g},{v['p90']:.17g}\n")
    if not cfg["model"]["kind"].endswith("metric") and cfg["recipe"] != "pendulum-adaptive":
        model = load_model(os.path.join(out, f"seed_{seeds[0]}", "model.ckpt"))
        eps = chernoff_ucb(rows[0]["lyap_k"], cfg["data"]["n_test"], cfg["bounds"]["delta"])
        jsonio.dump(ex.radius_analysis(cfg, model, eps, seeds[0]), os.path.join(out, "radius.json"))
    return {"per_seed": rows, "percentiles": table}


# -- argument handling ----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="certkit", description="Learn and check certificate functions.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--threads", type=int, default=1, help="worker processes for multi-seed runs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="sample training and test data")
    p = sub.add_parser("train", parents=[common], help="train a certificate")
    p.add_argument("--data", required=True)
    for name, hlp in (("eval", "violation counts and bounds"), ("radius", "global radii")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
    for name, hlp in (("grid", "grid violation set"), ("adapt", "adaptive control demo")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--model", required=True)
    p = sub.add_parser("reproduce", parents=[common], help="run a full recipe")
    p.add_argument("name", choices=cfgmod.RECIPES)
    return ap


def resolve_args(args):
    user = cfgmod.load(args.config) if args.config else {}
    if args.command == "reproduce":
        if user.get("recipe", args.name) != args.name:
            raise cfgmod.ConfigError("recipe", f"config recipe {user['recipe']!r} != {args.name!r}")
        user["recipe"] = args.name
    cfg = cfgmod.resolve(user, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads < 1:
        raise cfgmod.ConfigError("threads", "must be at least 1")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_args(args)
        start = time.perf_counter()
        if args.command == "generate":
            cmd_generate(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.data, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.model, args.data, args.out)
        elif args.command == "grid":
            cmd_grid(cfg, args.model, args.out)
        elif args.command == "radius":
            cmd_radius(cfg, args.model, args.data, args.out)
        elif args.command == "adapt":
            cmd_adapt(cfg, args.model, args.out)
        else:
            cmd_reproduce(cfg, args.out, args.threads)
        print(f"{args.command}: done in {time.perf_counter() - start:.1f}s -> {args.out}")
        return 0
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (cfgmod.ConfigError, FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
