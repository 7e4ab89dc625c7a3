"""Command-line front end: ``sfml {gen-data,train,predict,validate} --config FILE``.

Relative paths in a config are resolved against ``--out`` when given and
against the config file's directory otherwise. Exit codes: 0 success,
2 configuration, 3 simulation, 4 training, 5 prediction, 6 validation
threshold exceeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import dataset, predict, training
from .errors import (ConfigurationError, DomainError, FormatError, ModelError, NumericalError,
                     RunawayError, SFMLError, TrainingError)
from .excitation import ExcitationSignal
from .expr import parse_expression
from .flow import load_flow
from .systems import BUILTIN_NAMES, builtin_system

EXIT_OK, EXIT_CONFIG, EXIT_SIMULATE, EXIT_TRAIN, EXIT_PREDICT, EXIT_THRESHOLD = 0, 2, 3, 4, 5, 6

TRAIN_KEYS = ", ".join(f.name for f in fields(training.TrainConfig)
                       if f.name not in ("seed", "checkpoint_path"))

SCENARIO_HELP = """\
  scenario.x0           initial state (list of d numbers)
  scenario.u            excitation: expression in t (e.g. "0.5*sin(6*t)"), a list of
                        expressions (one per channel), or {"file": PATH} with columns
                        t u_1 .. u_nu
  scenario.T            horizon
  scenario.n_ens        ensemble size
  scenario.snapshot_times  times for snapshot histograms / distances (optional)"""

KEYS = {
    "gen-data": f"""\
config keys:
  seed                  root seed (required unless --seed is given)
  system                built-in system: {", ".join(BUILTIN_NAMES)}
  M                     number of snapshot pairs
  x_box                 optional [lo, hi] override of the state sampling box
  gamma_box             optional [lo, hi] override of the coefficient box
  n_sub                 optional simulator substeps per step
  dataset               output dataset path (default "dataset.sfml")""",
    "train": f"""\
config keys:
  seed                  root seed (required unless --seed is given)
  dataset               input dataset path
  checkpoint            output checkpoint path (default "model.sfmc")
  history               output history path, JSON lines (default "history.jsonl")
  model.n_layers        flow layers (default 5)
  model.hidden          conditioner hidden widths (default [20, 20, 20])
  model.s_max           log-scale clamp (default 5.0)
  train.*               {TRAIN_KEYS}""",
    "predict": f"""\
config keys:
  seed                  root seed (required unless --seed is given)
  checkpoint            input checkpoint path
{SCENARIO_HELP}
  ensemble              output ensemble path (default "ensemble.sfme")
  plot_dir              output directory for columnar plot data (default "plots")""",
    "validate": f"""\
config keys:
  seed                  root seed (required unless --seed is given)
  checkpoint            input checkpoint path, or the string "oracle" to validate
                        the truth simulator against itself
  system                built-in truth system: {", ".join(BUILTIN_NAMES)}
  n_sub                 optional truth simulator substeps per step
{SCENARIO_HELP}
  thresholds            optional {{"mean", "std", "w1", "ks"}} limits; exceeding any
                        of them exits with status 6
  report                output report path, JSON lines (default "report.jsonl")
  plot_dir              output directory for columnar plot data (default "plots")""",
}

log = logging.getLogger("sfml.cli")


class Context:
    def __init__(self, cfg: dict, base: Path, seed: int, threads: int):
        self.cfg, self.base, self.seed, self.threads = cfg, base, seed, threads

    def get(self, key, default=None, required=False):
        if key not in self.cfg:
            if required:
                raise ConfigurationError(f"config key {key!r} is required")
            return default
        return self.cfg[key]

    def path(self, key, default=None, must_exist=False) -> Path:
        value = self.get(key, default, required=default is None)
        if not isinstance(value, str):
            raise ConfigurationError(f"config key {key!r} must be a path string")
        p = Path(value)
        p = p if p.is_absolute() else self.base / p
        if must_exist and not p.exists():
            raise ConfigurationError(f"{key}: file not found: {p}")
        return p


def _box(value, key):
    if value is None:
        return None
    if not (isinstance(value, list) and len(value) == 2):
        raise ConfigurationError(f"{key} must be [lo, hi]")
    return tuple(np.atleast_1d(np.asarray(v, dtype=float)) for v in value)


def parse_signal(spec, base: Path, n_u: int) -> ExcitationSignal:
    """Excitation from a config value (expression, list of expressions, or file)."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        spec = str(spec)
    if isinstance(spec, str):
        spec = [spec]
    if isinstance(spec, list):
        if len(spec) != n_u:
            raise ConfigurationError(f"excitation needs {n_u} channel expression(s), "
                                     f"got {len(spec)}")
        fns = [parse_expression(str(s)) for s in spec]
        label = "; ".join(str(s) for s in spec)
        if n_u == 1:
            return ExcitationSignal.analytic(fns[0], 1, label)
        return ExcitationSignal.analytic(lambda t: np.stack([f(t) for f in fns], axis=-1),
                                         n_u, label)
    if isinstance(spec, dict) and "file" in spec:
        p = Path(spec["file"])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigurationError(f"excitation file not found: {p}")
        try:
            table = np.atleast_2d(np.loadtxt(p, ndmin=2))
        except ValueError as err:
            raise ConfigurationError(f"unreadable excitation file {p}: {err}") from None
        if table.shape[1] != n_u + 1:
            raise ConfigurationError(f"excitation file needs {n_u + 1} columns, "
                                     f"has {table.shape[1]}")
        return ExcitationSignal.sampled(table[:, 0], table[:, 1:])
    raise ConfigurationError("scenario.u must be an expression, a list of expressions "
                             "or {\"file\": PATH}")


def _scenario(ctx: Context, d: int, n_u: int):
    sc = ctx.get("scenario", required=True)
    if not isinstance(sc, dict):
        raise ConfigurationError("scenario must be an object")
    for key in ("x0", "u", "T", "n_ens"):
        if key not in sc:
            raise ConfigurationError(f"scenario.{key} is required")
    x0 = np.atleast_1d(np.asarray(sc["x0"], dtype=float))
    if x0.shape != (d,):
        raise ConfigurationError(f"scenario.x0 must have {d} entries")
    u = parse_signal(sc["u"], ctx.base, n_u)
    T, n_ens = float(sc["T"]), int(sc["n_ens"])
    if T <= 0 or n_ens < 1:
        raise ConfigurationError("scenario.T must be > 0 and scenario.n_ens >= 1")
    times = [float(t) for t in sc.get("snapshot_times", [])]
    return x0, u, T, n_ens, times


def cmd_gen_data(ctx: Context) -> int:
    system = builtin_system(ctx.get("system", required=True))
    M = int(ctx.get("M", required=True))
    out = ctx.path("dataset", "dataset.sfml")
    try:
        ts = dataset.generate_training_set(system, M, ctx.seed,
                                           _box(ctx.get("x_box"), "x_box"),
                                           _box(ctx.get("gamma_box"), "gamma_box"),
                                           ctx.get("n_sub"))
    except (NumericalError, ModelError, RunawayError) as err:
        print(f"simulation failed: {err}", file=sys.stderr)
        return EXIT_SIMULATE
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(ts, out)
    print(f"wrote {out}: M={ts.M} d={ts.d} n_gamma={ts.n_gamma} dt={ts.dt:g}")
    return EXIT_OK


def _train_config(ctx: Context, checkpoint: Path) -> training.TrainConfig:
    section = dict(ctx.get("train", {}))
    allowed = {f.name for f in fields(training.TrainConfig)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(f"unknown train keys: {sorted(unknown)}")
    section["seed"] = ctx.seed
    section["checkpoint_path"] = str(checkpoint) if section.get("checkpoint_every") else None
    return training.TrainConfig(**section)


def cmd_train(ctx: Context, resume: bool = False) -> int:
    ts = dataset.load(ctx.path("dataset", must_exist=True))
    ckpt = ctx.path("checkpoint", "model.sfmc")
    hist = ctx.path("history", "history.jsonl")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    cfg = _train_config(ctx, ckpt)
    state = None
    if resume and ckpt.exists():
        flow, state, _ = training.resume(ckpt)
        print(f"resuming from epoch {state.epoch}")
    else:
        model = dict(ctx.get("model", {}))
        flow = training.build_flow(ts, int(model.get("n_layers", 5)),
                                   tuple(model.get("hidden", (20, 20, 20))),
                                   float(model.get("s_max", 5.0)), seed=cfg.seed,
                                   lattice=cfg.lattice, precision=cfg.precision)
    state = state or training.TrainState()
    try:
        training.train(flow, ts, cfg, state)
    except (TrainingError, NumericalError) as err:
        print(f"training failed: {err}", file=sys.stderr)
        training.save_checkpoint(ckpt, flow, state, cfg)
        return EXIT_TRAIN
    training.save_checkpoint(ckpt, flow, state, cfg)
    training.write_history(state.history, hist)
    if state.history:
        last = state.history[-1]
        print(f"epoch {last['epoch']} nll {last['loss']:.6f} best {state.best_nll:.6f}")
    print(f"wrote {ckpt}")
    return EXIT_OK


def cmd_predict(ctx: Context) -> int:
    flow = load_flow(ctx.path("checkpoint", must_exist=True))
    x0, u, T, n_ens, times = _scenario(ctx, flow.d, flow.n_u)
    n_steps = int(round(T / flow.basis.dt))
    try:
        with warnings.catch_warnings(record=True):
            warnings.simplefilter("always")
            ens = predict.ensemble(flow, x0, u, n_steps, n_ens, ctx.seed, ctx.threads,
                                   label=u.label)
    except (NumericalError, DomainError) as err:
        print(f"prediction failed: {err}", file=sys.stderr)
        return EXIT_PREDICT
    for note in ens.warnings:
        print(f"warning: {note}", file=sys.stderr)
    out = ctx.path("ensemble", "ensemble.sfme")
    out.parent.mkdir(parents=True, exist_ok=True)
    ens.save(out)
    plots = predict.write_ensemble_plot_data(ens, ctx.path("plot_dir", "plots"), times)
    print(f"wrote {out} ({ens.n_ens} x {ens.n_steps + 1} x {ens.d}) and {len(plots)} plot files")
    return EXIT_OK


def cmd_validate(ctx: Context) -> int:
    system = builtin_system(ctx.get("system", required=True))
    if ctx.get("checkpoint", required=True) == "oracle":
        model = predict.SimulatorMap(system, ctx.get("n_sub"))
    else:
        model = load_flow(ctx.path("checkpoint", must_exist=True))
    x0, u, T, n_ens, times = _scenario(ctx, system.d, system.n_u)
    thresholds = ctx.get("thresholds", {})
    try:
        report = predict.validate(model, system, x0, u, T, n_ens, times, ctx.seed,
                                  ctx.threads, ctx.get("n_sub"),
                                  plot_dir=ctx.path("plot_dir", "plots"))
    except (NumericalError, ModelError, RunawayError, DomainError) as err:
        print(f"validation run failed: {err}", file=sys.stderr)
        return EXIT_PREDICT
    out = ctx.path("report", "report.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(out)
    for j, (me, se) in enumerate(zip(report.max_mean_error, report.max_std_error)):
        print(f"x{j}: max |mean err| {me:.4g}  max |std err| {se:.4g}")
    for s in report.snapshots:
        print(f"t={s['t']:g} x{s['coord']}: W1 {s['w1']:.4g}  KS {s['ks']:.4g}")
    bad = report.violations(thresholds)
    for msg in bad:
        print(f"FAIL {msg}")
    print(f"wrote {out}")
    return EXIT_THRESHOLD if bad else EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict,
            "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfml", description="Learn and roll out stochastic flow maps.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, epilog=KEYS[name],
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int,
                       help="worker cap (default: $SFML_THREADS, else 1)")
        p.add_argument("--out", help="base directory for relative paths")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from the checkpoint if it exists")
    return parser


def _threads(arg) -> int:
    if arg is not None:
        value = arg
    else:
        env = os.environ.get("SFML_THREADS")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise ConfigurationError(f"SFML_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise ConfigurationError("thread count must be >= 1")
    return value


def _context(args) -> Context:
    path = Path(args.config)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"invalid JSON in {path}: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a JSON object")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigurationError("a non-negative integer seed is required (config or --seed)")
    base = Path(args.out) if args.out else path.resolve().parent
    return Context(cfg, base, seed, _threads(args.threads))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        ctx = _context(args)
        torch.set_num_threads(ctx.threads)
        if args.command == "train":
            return cmd_train(ctx, args.resume)
        return COMMANDS[args.command](ctx)
    except (ConfigurationError, FormatError, DomainError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SFMLError as err:
        print(f"error: {err}", file=sys.stderr)
        return {"gen-data": EXIT_SIMULATE, "train": EXIT_TRAIN}.get(args.command, EXIT_PREDICT)


if __name__ == "__main__":
    sys.exit(main())
