"""Command-line entry point: ``odernn {gen,train,eval,sweep,diag}``.

Configs are JSON files.  A relative config path that does not exist in the
working directory is looked up in ``$ODERNN_CONFIG_DIR``.  Unknown keys are
rejected with their full path.

Exit codes: 0 success, 1 usage or config error, 2 numeric failure,
3 sweep finished with failed cells.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .channel import (ArrayConfig, GenConfig, OfdmConfig, generate_dataset, random_scene,
                      read_dataset, write_dataset)
from .diagnostics import CHECKS, run_checks
from .evaluation import SweepSpec, dataset_nmse, run_sweep
from .models import MODEL_NAMES, build_model, load_checkpoint, save_checkpoint
from .numerics import seeded_rng
from .odesolve import DivergenceError, SolverConfig
from .training import ENGINES, TrainConfig, TrainingDiverged, fit_csi_scale, fit_time_scale, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 1, 2, 3
CONFIG_DIR_ENV = "ODERNN_CONFIG_DIR"

log = logging.getLogger("odernn")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "scene": {"seed": 0, "n_scatterers": 7, "los": True, "bs": [60.0, -400.0],
              "bounds": [0.0, 120.0, 0.0, 60.0]},
    "ofdm": {"n_c": 16, "f_center": 3.5e9, "bandwidth": 100e6},
    "array": {"n_t": 8, "spacing": None, "orientation": 0.0},
    "generation": {"n_samples": 2000, "seed": 0, "n_obs": 5, "interval": 1e-3, "jitter": 0.0,
                   "speed_range": [5.0, 5.0], "max_retries": 1000,
                   "noise": {"level": 0.0, "elevated_fraction": 0.2, "base_ratio": 0.1}},
    "model": {"name": "ode-rnn", "hidden": 64, "dyn_hidden": [96, 128, 96]},
    "training": {"steps": 5000, "batch_size": 20, "lr": 1e-3, "engine": "direct", "seed": 0,
                 "eval_every": 500, "clip": None, "obs_dropout": 0.0,
                 "solver": {"method": "rk4", "step": None, "rtol": 1e-6, "atol": 1e-8,
                            "max_steps": 10000}},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def resolve_config_path(path: str) -> str:
    if os.path.exists(path) or os.path.isabs(path):
        return path
    cfg_dir = os.environ.get(CONFIG_DIR_ENV)
    if cfg_dir and os.path.exists(os.path.join(cfg_dir, path)):
        return os.path.join(cfg_dir, path)
    return path


def load_run_config(path: str | None) -> dict:
    """Defaults merged with ``path`` (if any).  Validates every section."""
    over = {}
    if path:
        p = resolve_config_path(path)
        try:
            with open(p) as fh:
                over = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(over, dict):
            raise ConfigError(f"{p}: top level must be an object")
    cfg = _merge(DEFAULTS, over)
    build_parts(cfg)  # validation only
    return cfg


def _section(name, fn):
    try:
        return fn()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def build_parts(cfg: dict) -> dict:
    """Typed objects for every config section."""
    g = dict(cfg["generation"])
    n_samples, data_seed = g.pop("n_samples"), g.pop("seed")
    if not isinstance(n_samples, int) or n_samples < 1:
        raise ConfigError("invalid 'generation.n_samples': must be a positive integer")
    gen = _section("generation", lambda: GenConfig.from_dict(g))
    ofdm = _section("ofdm", lambda: OfdmConfig(**cfg["ofdm"]))
    array = _section("array", lambda: ArrayConfig(**cfg["array"]))
    sc = cfg["scene"]
    scene = _section("scene", lambda: random_scene(seeded_rng(sc["seed"]), n_scatterers=sc["n_scatterers"],
                                                   los=sc["los"], bounds=tuple(sc["bounds"]),
                                                   bs=tuple(sc["bs"])))
    m = cfg["model"]
    if m["name"] not in MODEL_NAMES:
        raise ConfigError(f"invalid 'model.name': {m['name']!r} (choose from {MODEL_NAMES})")
    t = dict(cfg["training"])
    s = dict(t.pop("solver"))
    if s["step"] is None:
        s["step"] = gen.interval
    solver = _section("training.solver", lambda: SolverConfig(**s))
    tcfg = _section("training", lambda: TrainConfig(solver=solver, **t))
    return {"gen": gen, "ofdm": ofdm, "array": array, "scene": scene, "n_samples": n_samples,
            "data_seed": data_seed, "train": tcfg, "model": m}


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    parts = build_parts(cfg)
    seed = parts["data_seed"] if args.seed is None else args.seed
    ds = generate_dataset(parts["scene"], parts["ofdm"], parts["array"], parts["gen"],
                          parts["n_samples"], seed)
    ds.meta["config"] = cfg
    write_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} samples, split {len(ds.train_index)}/{len(ds.test_index)} "
          f"(train/test), {ds.dims[0]}x{ds.dims[1]} CSI, {ds.n_obs} observations")
    return EXIT_OK


def _read(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset not found: {path}") from None


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    parts = build_parts(cfg)
    ds = _read(args.dataset)
    name = args.model or parts["model"]["name"]
    tcfg = parts["train"]
    over = {k: v for k, v in (("engine", args.engine), ("steps", args.steps), ("seed", args.seed))
            if v is not None}
    tcfg = _section("training", lambda: replace(tcfg, **over))
    if cfg["training"]["solver"]["step"] is None:
        tcfg.solver = replace(tcfg.solver, step=float(np.median(np.diff(ds.times[0]))))
    n_t, n_c = ds.dims
    model = build_model(name, n_t, n_c, seed=tcfg.seed, hidden=parts["model"]["hidden"],
                        dyn_hidden=parts["model"]["dyn_hidden"], csi_scale=fit_csi_scale(ds),
                        time_scale=fit_time_scale(ds))
    log_path = args.log or str(args.out) + ".log.jsonl"
    evaluate = (lambda m: dataset_nmse(m, ds, solver=tcfg.solver)) if len(ds.test_index) else None
    res = train(model, ds, tcfg, log_path=log_path, evaluate=evaluate)
    final = res.history[-1] if res.history else {}
    if res.losses and not math.isfinite(res.losses[-1]):
        raise TrainingDiverged(len(res.losses), [])
    save_checkpoint(model, args.out, extra={"training": tcfg.to_dict(), "dataset": str(args.dataset)})
    print(f"wrote {args.out}: {name}, {model.n_params()} parameters, {tcfg.steps} steps, "
          f"final train_mse {final.get('train_mse', float('nan')):.6g}, "
          f"test_nmse {final.get('test_nmse')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _read(args.dataset)
    try:
        model, extra = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    solver_d = extra.get("training", {}).get("solver")
    solver = SolverConfig(**solver_d) if solver_d else None
    thr = args.drop_threshold
    if thr is not None and math.isfinite(thr) and not model.uses_time:
        raise ConfigError(f"--drop-threshold needs a continuous-time model; {model.kind} must "
                          "retain every observation because it cannot consume irregular sequences")
    if (model.n_t, model.n_c) != ds.dims:
        raise ConfigError(f"checkpoint expects {model.n_t}x{model.n_c} CSI but the dataset holds "
                          f"{ds.dims[0]}x{ds.dims[1]}")
    val = dataset_nmse(model, ds, solver=solver, drop_threshold=thr)
    report = {"dataset": str(args.dataset), "checkpoint": str(args.checkpoint), "model": model.kind,
              "drop_threshold": thr if thr is None or math.isfinite(thr) else None,
              "n_test": int(len(ds.test_index)), "nmse": val,
              "nmse_db": 10 * math.log10(val) if val > 0 else float("-inf")}
    out = args.out or str(args.checkpoint) + ".eval.json"
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2)
    print(f"test NMSE {val:.6g} ({report['nmse_db']:.2f} dB) over {report['n_test']} samples")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        with open(resolve_config_path(args.spec)) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"sweep spec not found: {args.spec}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from None
    spec = _section("sweep", lambda: SweepSpec.from_dict(d))
    res = run_sweep(spec, jobs=args.jobs, out_dir=args.out)
    csv_path, json_path = res.write(args.out)
    for a in res.aggregates():
        print(f"{spec.variable}={a['value']}\t{a['model']}\tmedian NMSE {a['median']:.6g}")
    print(f"wrote {csv_path} and {json_path}")
    if res.failed:
        print(f"{len(res.failed)} of {len(res.records)} runs failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_diag(args) -> int:
    rows = run_checks(args.check)
    print("check\tname\tvalue\tbound\tresult")
    for r in rows:
        print(r.line())
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="odernn", description="CSI prediction with ODE-RNN and baselines")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a CSI1 dataset")
    g.add_argument("config", nargs="?", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("dataset")
    t.add_argument("--config", default=None)
    t.add_argument("--model", choices=MODEL_NAMES, default=None)
    t.add_argument("--engine", choices=ENGINES, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None, help="JSON-lines log (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test NMSE of a checkpoint")
    e.add_argument("dataset")
    e.add_argument("checkpoint")
    e.add_argument("--drop-threshold", type=float, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a sweep spec")
    s.add_argument("spec")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", default="results")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("diag", help="run the numerical self-checks")
    d.add_argument("--check", choices=sorted(CHECKS) + ["all"], default="all")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingDiverged, DivergenceError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
