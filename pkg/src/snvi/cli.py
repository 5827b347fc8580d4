"""Command-line entry point: single runs, benchmark sweeps, oracle sample
generation, and estimator diagnostics.

Configuration is JSON with flat dotted-key overrides (`--set a.b=c`).
Unknown keys are hard errors. Every run writes its fully resolved config
next to its outputs so the run can be reproduced byte-identically.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import os
import sys
import time
import traceback

import numpy as np

from .inference import Posterior, SnviConfig, run_snvi
from .metrics import c2st, mode_mass, moment_error
from .ndiff import ContractError
from .objectives import (
    STEP_FNS,
    FitSchedule,
    VariationalObjective,
    snr_probe,
)
from .density_models import TrainConfig
from .rng import substream
from .samplers import SliceConfig
from .sir import SirConfig, sir_diagnostics
from .tasks import REGISTRY, get_task


class ConfigError(ValueError):
    pass


METHODS = {
    "snvi-fkl": {"surrogate": "likelihood", "sampler": "vi", "kind": "fkl", "stl": False},
    "snvi-iw": {"surrogate": "likelihood", "sampler": "vi", "kind": "iwelbo", "stl": True},
    "snvi-alpha": {"surrogate": "likelihood", "sampler": "vi", "kind": "renyi", "stl": True},
    "snvi-rkl": {"surrogate": "likelihood", "sampler": "vi", "kind": "rkl", "stl": False},
    "snrvi-fkl": {"surrogate": "ratio", "sampler": "vi", "kind": "fkl", "stl": False},
    "snrvi-iw": {"surrogate": "ratio", "sampler": "vi", "kind": "iwelbo", "stl": True},
    "snrvi-alpha": {"surrogate": "ratio", "sampler": "vi", "kind": "renyi", "stl": True},
    "snrvi-rkl": {"surrogate": "ratio", "sampler": "vi", "kind": "rkl", "stl": False},
    "snle-mcmc": {"surrogate": "likelihood", "sampler": "mcmc", "kind": "fkl", "stl": False},
    "snre-mcmc": {"surrogate": "ratio", "sampler": "mcmc", "kind": "fkl", "stl": False},
}

DEFAULT_CONFIG = {
    "task": None,
    "method": "snvi-fkl",
    "budget": 10_000,
    "rounds": 10,
    "sims_per_round": None,  # explicit per-round list; overrides budget/rounds
    "seed": 0,
    "obs_seed": None,
    "out": None,
    "sir": True,
    "sir_k": 32,
    "calibration": False,
    "proposal": "posterior",
    "mixture_beta": 0.5,
    "proposal_sir": False,
    "objective": {"n_particles": 256, "k": 8, "alpha": 0.1, "stl": None, "lr": 1e-2},
    "vi": {"min_iters": 100, "max_iters": 1000, "window": 50, "rel_tol": 1e-3,
           "lr_half_life": 300},
    "train": {"batch_size": 50, "max_epochs": 500, "patience": 20,
              "val_fraction": 0.1, "lr": 5e-4},
    "slice": {"chains": 100, "burn_in": 200, "thin": None, "max_doublings": 10},
    "eval": {"c2st": False, "samples": 10_000},
}


def _merge(base: dict, overlay: dict, path=""):
    out = copy.deepcopy(base)
    unknown = []
    for key, val in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            unknown.append(here)
            continue
        if isinstance(base[key], dict) and isinstance(val, dict):
            merged, sub_unknown = _merge(base[key], val, here)
            out[key] = merged
            unknown.extend(sub_unknown)
        else:
            out[key] = val
    return out, unknown


def _parse_set(assignment: str):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    leaf = node
    parts = key.split(".")
    for part in parts[:-1]:
        leaf[part] = {}
        leaf = leaf[part]
    leaf[parts[-1]] = value
    return node


def resolve_config(config_path=None, flag_overrides=None, set_overrides=()):
    resolved = copy.deepcopy(DEFAULT_CONFIG)
    unknown_total = []
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        resolved, unknown = _merge(resolved, file_cfg)
        unknown_total.extend(unknown)
    for overlay in (flag_overrides or {},):
        resolved, unknown = _merge(resolved, overlay)
        unknown_total.extend(unknown)
    for assignment in set_overrides:
        resolved, unknown = _merge(resolved, _parse_set(assignment))
        unknown_total.extend(unknown)
    if unknown_total:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(set(unknown_total))))

    if resolved["task"] not in REGISTRY:
        raise ConfigError(f"unknown task {resolved['task']!r}; "
                          f"available: {sorted(REGISTRY)}")
    if resolved["method"] not in METHODS:
        raise ConfigError(f"unknown method {resolved['method']!r}; "
                          f"available: {sorted(METHODS)}")
    if resolved["sims_per_round"] is None:
        if resolved["budget"] % resolved["rounds"] != 0:
            raise ConfigError(
                f"budget {resolved['budget']} does not divide evenly into "
                f"{resolved['rounds']} rounds")
    return resolved


def build_run(resolved):
    method = METHODS[resolved["method"]]
    obj_cfg = resolved["objective"]
    stl = method["stl"] if obj_cfg["stl"] is None else obj_cfg["stl"]
    objective = VariationalObjective(kind=method["kind"],
                                     n_particles=obj_cfg["n_particles"],
                                     k=obj_cfg["k"], alpha=obj_cfg["alpha"],
                                     stl=stl, lr=obj_cfg["lr"])
    vi = resolved["vi"]
    schedule = FitSchedule(min_iters=vi["min_iters"], max_iters=vi["max_iters"],
                           window=vi["window"], rel_tol=vi["rel_tol"],
                           lr_half_life=vi["lr_half_life"])
    tr = resolved["train"]
    train = TrainConfig(batch_size=tr["batch_size"], max_epochs=tr["max_epochs"],
                        patience=tr["patience"], val_fraction=tr["val_fraction"],
                        lr=tr["lr"])
    sl = resolved["slice"]
    slice_cfg = SliceConfig(chains=sl["chains"], burn_in=sl["burn_in"],
                            thin=sl["thin"], max_doublings=sl["max_doublings"])
    sims = resolved["sims_per_round"]
    if sims is None:
        sims = resolved["budget"] // resolved["rounds"]
        rounds = resolved["rounds"]
    else:
        rounds = len(sims)
    cfg = SnviConfig(
        rounds=rounds,
        sims_per_round=sims,
        surrogate=method["surrogate"],
        objective=objective,
        sir=SirConfig(k=resolved["sir_k"]) if resolved["sir"] else None,
        calibration=resolved["calibration"],
        proposal=resolved["proposal"],
        mixture_beta=resolved["mixture_beta"],
        proposal_sir=resolved["proposal_sir"],
        sampler=method["sampler"],
        slice_cfg=slice_cfg,
        fit_schedule=schedule,
        train=train,
    )
    task = get_task(resolved["task"], obs_seed=resolved["obs_seed"])
    return task, cfg


def _evaluate_posterior(task, posterior, resolved, out_dir, surrogate=None):
    """Posterior-quality rows appended to the run's metrics.csv."""
    n_eval = resolved["eval"]["samples"]
    rng = substream(resolved["seed"], "posterior-eval")
    t0 = time.perf_counter()
    samples = posterior.sample(n_eval, rng)
    sampling_time = time.perf_counter() - t0
    rows = [("final", "posterior_sampling_time", sampling_time)]
    if task.oracle is not None:
        if hasattr(task.oracle, "mean"):
            err = moment_error(samples, task.oracle.mean, task.oracle.cov)
            rows.append(("final", "moment_error.mean", err["mean_abs_error"]))
            rows.append(("final", "moment_error.cov", err["cov_frobenius_error"]))
        if resolved["eval"]["c2st"]:
            oracle_samples = task.oracle.sample(
                n_eval, substream(resolved["seed"], "oracle-eval"))
            res = c2st(samples, oracle_samples, seed=resolved["seed"])
            rows.append(("final", "c2st", res.accuracy))
    gap = _surrogate_loglik_gap(task, surrogate, resolved["seed"])
    if gap is not None:
        rows.append(("final", "surrogate_loglik_mae", gap))
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for rnd, metric, value in rows:
            writer.writerow([rnd] + [""] * 10 + [metric, format(float(value), ".17g")])
    return samples


def _surrogate_loglik_gap(task, surrogate, seed, n=1000):
    """Mean-abs gap between surrogate and true log likelihood on held-out
    prior-predictive pairs (tasks exposing a tractable likelihood only)."""
    from .density_models import LikelihoodModel

    if task.true_log_likelihood is None or not isinstance(surrogate, LikelihoodModel):
        return None
    rng = substream(seed, "loglik-gap")
    thetas = task.prior.sample(n, rng)
    xs, valid = task.simulate(thetas, rng)
    if not np.any(valid):
        return None
    thetas, xs = thetas[valid], xs[valid]
    learned = np.asarray(surrogate.log_prob(xs, thetas))
    true = task.true_log_likelihood(xs, thetas)
    ok = np.isfinite(true) & np.isfinite(learned)
    return float(np.mean(np.abs(learned[ok] - true[ok])))


def cmd_run(resolved) -> int:
    out_dir = resolved["out"] or f"runs/{resolved['task']}-{resolved['method']}-s{resolved['seed']}"
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=1, sort_keys=True)
    task, cfg = build_run(resolved)
    posterior, artifacts = run_snvi(task, cfg, seed=resolved["seed"],
                                    out_dir=out_dir)
    _evaluate_posterior(task, posterior, resolved, out_dir,
                        surrogate=artifacts.surrogate)
    print(f"run complete: {out_dir}")
    return 0


# --- benchmark ------------------------------------------------------------

RESULT_FIELDS = ["task", "method", "budget", "seed", "c2st", "moment_error_mean",
                 "t_simulate", "t_train", "t_fit", "t_sampling", "error"]


def _run_cell(cell):
    """One benchmark cell: run, then score against the task oracle."""
    resolved = cell["resolved"]
    try:
        task, cfg = build_run(resolved)
        t0 = time.perf_counter()
        posterior, artifacts = run_snvi(task, cfg, seed=resolved["seed"])
        timers = {k: sum(a.timings.get(k, 0.0) for a in artifacts.rounds)
                  for k in ("simulate", "train", "fit")}
        rng = substream(resolved["seed"], "bench-eval")
        t0 = time.perf_counter()
        samples = posterior.sample(resolved["eval"]["samples"], rng)
        t_sampling = time.perf_counter() - t0
        row = {"task": resolved["task"], "method": resolved["method"],
               "budget": resolved["budget"], "seed": resolved["seed"],
               "t_simulate": timers["simulate"], "t_train": timers["train"],
               "t_fit": timers["fit"], "t_sampling": t_sampling, "error": ""}
        if task.oracle is not None:
            oracle_samples = task.oracle.sample(
                resolved["eval"]["samples"], substream(resolved["seed"], "bench-oracle"))
            row["c2st"] = c2st(samples, oracle_samples, seed=resolved["seed"]).accuracy
            if hasattr(task.oracle, "mean"):
                row["moment_error_mean"] = moment_error(
                    samples, task.oracle.mean, task.oracle.cov)["mean_abs_error"]
        return row
    except Exception as err:  # partial failures recorded, suite continues
        return {"task": resolved.get("task"), "method": resolved.get("method"),
                "budget": resolved.get("budget"), "seed": resolved.get("seed"),
                "error": f"{type(err).__name__}: {err}"}


def expand_suite(suite: dict):
    cells = []
    defaults = suite.get("defaults", {})
    for entry in suite["cells"]:
        spec = dict(defaults)
        spec.update(entry)
        for method in np.atleast_1d(spec["methods"]).tolist():
            for budget in np.atleast_1d(spec["budgets"]).tolist():
                for seed in np.atleast_1d(spec["seeds"]).tolist():
                    overlay = {k: v for k, v in spec.items()
                               if k not in ("methods", "budgets", "seeds")}
                    overlay.update({"method": method, "budget": int(budget),
                                    "seed": int(seed), "obs_seed": int(seed)})
                    resolved = resolve_config(flag_overrides=overlay)
                    cells.append({"resolved": resolved})
    return cells


def cmd_benchmark(suite_path, out_dir) -> int:
    with open(suite_path, "r", encoding="utf-8") as fh:
        suite = json.load(fh)
    cells = expand_suite(suite)
    os.makedirs(out_dir, exist_ok=True)
    workers = int(os.environ.get("SNVI_WORKERS", "1"))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]

    long_path = os.path.join(out_dir, "results_long.csv")
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, ".17g") if isinstance(v, float) else v)
                             for k, v in row.items()})

    # aggregate mean and normal-approximation 95% CI of C2ST per cell
    groups: dict = {}
    for row in rows:
        if row.get("error"):
            continue
        key = (row["task"], row["method"], row["budget"])
        groups.setdefault(key, []).append(row)
    agg_path = os.path.join(out_dir, "results.csv")
    with open(agg_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "method", "budget", "n_seeds", "c2st_mean",
                         "c2st_ci95", "t_fit_mean", "t_sampling_mean"])
        for (task_name, method, budget), rows_g in sorted(groups.items()):
            vals = [r["c2st"] for r in rows_g if "c2st" in r]
            ci = 1.96 * np.std(vals, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
            writer.writerow([
                task_name, method, budget, len(rows_g),
                format(float(np.mean(vals)), ".17g") if vals else "",
                format(float(ci), ".17g"),
                format(float(np.mean([r["t_fit"] for r in rows_g])), ".17g"),
                format(float(np.mean([r["t_sampling"] for r in rows_g])), ".17g"),
            ])
    n_failed = sum(1 for r in rows if r.get("error"))
    print(f"benchmark complete: {len(rows)} cells, {n_failed} failed -> {agg_path}")
    return 0


# --- oracle -----------------------------------------------------------------


def cmd_oracle(task_name, n, seed, out_dir, obs_seed=None) -> int:
    task = get_task(task_name, obs_seed=obs_seed)
    if task.oracle is None:
        print(f"task {task_name!r} has no oracle", file=sys.stderr)
        return 2
    os.makedirs(out_dir, exist_ok=True)
    xo_hash = hashlib.sha256(np.asarray(task.x_o).tobytes()).hexdigest()[:12]
    path = os.path.join(out_dir, f"oracle_{task_name}_{xo_hash}_{n}_{seed}.csv")
    if os.path.exists(path):
        print(f"cache hit: {path}")
        return 0
    samples = task.oracle.sample(n, substream(seed, "oracle-cli"))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{i}" for i in range(task.d_theta)])
        for row in samples:
            writer.writerow([format(v, ".17g") for v in row])
    print(f"wrote {n} oracle samples: {path}")
    return 0


# --- diagnose -----------------------------------------------------------------


def cmd_diagnose(resolved, repeats) -> int:
    out_dir = resolved["out"] or f"runs/diagnose-{resolved['task']}-s{resolved['seed']}"
    os.makedirs(out_dir, exist_ok=True)
    task, cfg = build_run(resolved)
    posterior, _ = run_snvi(task, cfg, seed=resolved["seed"])
    report = {"task": resolved["task"], "method": resolved["method"],
              "seed": resolved["seed"], "snr": {}, "sir": None}
    obj = cfg.objective
    for kind, step in STEP_FNS.items():
        probe_obj = VariationalObjective(kind=kind, n_particles=obj.n_particles,
                                         k=obj.k, alpha=obj.alpha, stl=obj.stl)
        snr = snr_probe(step, posterior.q, posterior.log_potential, probe_obj,
                        repeats=repeats, seed=resolved["seed"])
        report["snr"][kind] = {name: float(np.median(v)) for name, v in snr.items()}
    if cfg.sir is not None:
        report["sir"] = sir_diagnostics(posterior.q, posterior.log_potential,
                                        cfg.sir, probes=256,
                                        rng=substream(resolved["seed"], "diag-sir"))
    path = os.path.join(out_dir, "diagnose.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1)
    print(f"diagnostics written: {path}")
    return 0


# --- argument plumbing ----------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--task", default=None)
    p.add_argument("--method", default=None, choices=sorted(METHODS))
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--obs-seed", type=int, default=None, dest="obs_seed")
    p.add_argument("--out", default=None)
    p.add_argument("--sir", dest="sir", action="store_true", default=None)
    p.add_argument("--no-sir", dest="sir", action="store_false")
    p.add_argument("--calibration", action="store_true", default=None)
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="dotted-key config override")


def _flags_overlay(args):
    overlay = {}
    for key in ("task", "method", "budget", "rounds", "seed", "obs_seed", "out",
                "sir", "calibration"):
        val = getattr(args, key, None)
        if val is not None:
            overlay[key] = val
    return overlay


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="snvi", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="single inference run")
    _add_common(p_run)

    p_bench = sub.add_parser("benchmark", help="run a suite grid")
    p_bench.add_argument("suite", help="suite JSON file")
    p_bench.add_argument("--out", default="benchmark_results")

    p_oracle = sub.add_parser("oracle", help="generate oracle posterior samples")
    p_oracle.add_argument("--task", required=True)
    p_oracle.add_argument("--n", type=int, default=10_000)
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--obs-seed", type=int, default=None, dest="obs_seed")
    p_oracle.add_argument("--out", default="oracles")

    p_diag = sub.add_parser("diagnose", help="SNR probe and SIR ESS report")
    _add_common(p_diag)
    p_diag.add_argument("--repeats", type=int, default=50)

    args = parser.parse_args(argv)
    try:
        if args.verb == "run":
            resolved = resolve_config(args.config, _flags_overlay(args), args.overrides)
            return cmd_run(resolved)
        if args.verb == "benchmark":
            return cmd_benchmark(args.suite, args.out)
        if args.verb == "oracle":
            return cmd_oracle(args.task, args.n, args.seed, args.out,
                              obs_seed=args.obs_seed)
        if args.verb == "diagnose":
            resolved = resolve_config(args.config, _flags_overlay(args), args.overrides)
            return cmd_diagnose(resolved, args.repeats)
        raise ConfigError(f"unknown verb {args.verb!r}")
    except (ConfigError, ContractError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
