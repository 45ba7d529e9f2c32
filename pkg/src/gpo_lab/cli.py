"""Command line entry point: ``train``, ``verify``, ``sweep`` and ``dump-schedule``.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, RunManifest, parse_config, serialize
from .errors import ConfigError, GPOError, NumericalError
from .growth import schedule_value
from .theory import SUITE, run_check
from .trainer import read_metrics, summarize_run, train_loop

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SWEEP_COLUMNS = ("schedule", "seed", "update", "mean_return", "beta")
SUMMARY_COLUMNS = ("schedule", "runs", "failed", "final_mean", "final_std", "early_mean", "early_std", "frac_outside_half_mean")


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _prepare_output(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output_dir {path} is not writable: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output_dir {path} is not writable")
    return path


def _finish_manifest(cfg: RunConfig, out, started, env=None):
    manifest = RunManifest(serialize(cfg), __version__, started, resolved_env=env or {})
    manifest.finished = _now()
    manifest.add_tree(out)
    manifest.write(out / "manifest.json")


def _env_record(spec):
    return {
        "kind": spec.kind.value,
        "a_limit": spec.a_limit,
        "dt": spec.dt,
        "horizon": spec.horizon,
        "cmd_scaling": spec.cmd_scaling,
        "damping": spec.damping,
        "fatigue_scale": spec.fatigue_scale,
        "cmd_range": [list(p) for p in spec.cmd_range],
    }


# ---------------------------------------------------------------- train


def run_train(cfg: RunConfig, out=None, log=None):
    """One training run into ``out``; returns an exit code."""
    out = _prepare_output(out or cfg.output_dir)
    started = _now()
    spec = cfg.env_spec()
    (out / "config.ini").write_text(serialize(cfg))
    try:
        train_loop(cfg.trainer_for(), spec, out, cfg.checkpoint_every, progress=_progress(log, cfg.trainer.updates))
    except NumericalError as exc:
        _say(log, f"training aborted: {exc}")
        return EXIT_RUNTIME
    finally:
        _finish_manifest(cfg, out, started, _env_record(spec))
    return EXIT_OK


def _progress(log, total):
    if log is None:
        return None
    step = max(1, total // 10)

    def report(u, row):
        if (u + 1) % step == 0 or u + 1 == total:
            _say(log, f"update {u + 1}/{total}  beta={row['beta']:.4g}  return={row['mean_return']:.4g}")

    return report


def _say(log, msg):
    if log is not None:
        print(msg, file=log, flush=True)


# ---------------------------------------------------------------- verify


def run_verify(cfg: RunConfig, out=None, log=sys.stdout, only=None):
    """Full theory suite; one JSON report per check plus a summary."""
    out = _prepare_output(out or cfg.output_dir)
    started = _now()
    names = [n for n, _ in SUITE] if only is None else list(only)
    results = []
    for name in names:
        try:
            res = run_check(name, cfg.theory, cfg.seed).to_dict()
        except GPOError as exc:
            res = {"name": name, "passed": False, "margin": float("nan"), "details": {"error": str(exc)}}
        _write_json(out / f"{name}.json", res)
        results.append(res)
    summary = [{"name": r["name"], "passed": r["passed"], "margin": r["margin"]} for r in results]
    _write_json(out / "summary.json", {"checks": summary, "all_passed": all(r["passed"] for r in summary)})
    if log is not None:
        width = max(len(r["name"]) for r in summary)
        print(f"{'check':<{width}}  result  margin", file=log)
        for r in summary:
            print(f"{r['name']:<{width}}  {'PASS' if r['passed'] else 'FAIL':<6}  {r['margin']:.6g}", file=log)
    _finish_manifest(cfg, out, started)
    return EXIT_OK if all(r["passed"] for r in summary) else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- sweep


def _cell(args):
    cfg, kind, seed, out = args
    spec = cfg.env_spec(kind)
    try:
        art = train_loop(cfg.trainer_for(kind, seed), spec, out, cfg.checkpoint_every)
    except (GPOError, OSError, ValueError) as exc:
        return kind, seed, None, f"{type(exc).__name__}: {exc}"
    return kind, seed, art.metrics, ""


def bench_workers(n_cells):
    """Worker count: ``GPO_BENCH_THREADS`` if set, else the CPU count, never more than the cells."""
    env = os.environ.get("GPO_BENCH_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError(f"GPO_BENCH_THREADS={env!r} is not an integer") from exc
    return max(1, min(cap, n_cells))


def run_sweep(cfg: RunConfig, out=None, log=None):
    """Train every (schedule, seed) cell; returns ``(exit_code, summary_dict)``."""
    out = _prepare_output(out or cfg.output_dir)
    started = _now()
    (out / "config.ini").write_text(serialize(cfg))
    cells = [(cfg, kind, seed, out / kind / f"seed_{seed}") for kind in cfg.sweep.schedules for seed in cfg.sweep.seeds]
    workers = bench_workers(len(cells))
    if workers == 1:
        results = []
        for c in cells:
            results.append(_cell(c))
            _say(log, f"{c[1]} seed {c[2]} done")
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell, cells))

    runs = []
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for kind, seed, metrics, err in results:
            if metrics is None:
                runs.append({"schedule": kind, "seed": seed, "status": "failed", "error": err})
                continue
            for row in metrics:
                w.writerow([kind, seed, row["update"], repr(float(row["mean_return"])), repr(float(row["beta"]))])
            s = summarize_run(metrics, cfg.sweep.early_frac, cfg.sweep.window_frac)
            runs.append(
                {
                    "schedule": kind,
                    "seed": seed,
                    "status": "ok",
                    "final_return": s.final_return,
                    "early_return": s.early_return,
                    "mean_frac_outside_half": s.mean_frac_outside_half,
                }
            )
    per_schedule = {}
    for kind in cfg.sweep.schedules:
        ok = [r for r in runs if r["schedule"] == kind and r["status"] == "ok"]
        final = np.array([r["final_return"] for r in ok])
        early = np.array([r["early_return"] for r in ok])
        frac = np.array([r["mean_frac_outside_half"] for r in ok])
        per_schedule[kind] = {
            "runs": len(ok),
            "failed": sum(1 for r in runs if r["schedule"] == kind and r["status"] != "ok"),
            "final_mean": float(final.mean()) if ok else float("nan"),
            "final_std": float(final.std(ddof=1)) if len(ok) > 1 else 0.0,
            "early_mean": float(early.mean()) if ok else float("nan"),
            "early_std": float(early.std(ddof=1)) if len(ok) > 1 else 0.0,
            "frac_outside_half_mean": float(frac.mean()) if ok else float("nan"),
        }
    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for kind, s in per_schedule.items():
            w.writerow([kind] + [s[c] if isinstance(s[c], int) else repr(s[c]) for c in SUMMARY_COLUMNS[1:]])
    summary = {"runs": runs, "schedules": per_schedule}
    _write_json(out / "summary.json", summary)
    if log is not None:
        for kind, s in per_schedule.items():
            print(
                f"{kind:<9} final {s['final_mean']:.4f} +- {s['final_std']:.4f}   "
                f"early {s['early_mean']:.4f} +- {s['early_std']:.4f}   runs {s['runs']}",
                file=log,
            )
    _finish_manifest(cfg, out, started)
    code = EXIT_OK if all(r["status"] == "ok" for r in runs) else EXIT_RUNTIME
    return code, summary


def load_sweep(out):
    """Per-run metrics of a finished sweep: ``{(schedule, seed): rows}``."""
    out = Path(out)
    data = {}
    for path in sorted(out.glob("*/seed_*/metrics.csv")):
        data[(path.parent.parent.name, int(path.parent.name.split("_")[1]))] = read_metrics(path)
    return data


# ---------------------------------------------------------------- dump-schedule


def dump_schedule(cfg: RunConfig, stream, steps=None):
    sched = cfg.schedule
    steps = cfg.trainer.updates if steps is None else steps
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("t", "f", "beta"))
    t = np.arange(steps)
    f = np.atleast_1d(schedule_value(sched, t))
    for ti, fi in zip(t, f):
        w.writerow((int(ti), repr(float(fi)), repr(float(sched.a_limit * fi))))


# ---------------------------------------------------------------- argparse


def build_parser():
    p = argparse.ArgumentParser(prog="gpo-lab", description="Growing-action-range PPO laboratory.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train one policy and write metrics, checkpoints and a manifest"),
        ("verify", "run the numerical checks and write one JSON report per check"),
        ("sweep", "train every schedule kind x seed cell and aggregate the returns"),
        ("dump-schedule", "write the configured growth schedule as CSV t,f,beta"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="INI config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--output", type=Path, help="output directory (overrides run.output_dir)")
        sp.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
        if name == "verify":
            sp.add_argument("--check", action="append", choices=[n for n, _ in SUITE], help="run only this check (repeatable)")
        if name == "dump-schedule":
            sp.add_argument("--steps", type=int, help="number of rows (default: trainer.updates)")
    return p


def split_overrides(argv):
    """Separate ``--section.key=value`` items from ordinary arguments."""
    rest, overrides = [], []
    for item in argv:
        head = item[2:].split("=", 1)[0] if item.startswith("--") else ""
        if "." in head and "=" in item:
            overrides.append(item)
        else:
            rest.append(item)
    return rest, overrides


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = split_overrides(argv)
    parser = build_parser()
    args = parser.parse_args(rest)
    if args.seed is not None:
        overrides.append(f"--run.seed={args.seed}")
    if args.output is not None:
        overrides.append(f"--run.output_dir={args.output}")
    log = None if args.quiet else sys.stderr
    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "train":
            return run_train(cfg, log=log)
        if args.command == "verify":
            return run_verify(cfg, log=None if args.quiet else sys.stdout, only=args.check)
        if args.command == "sweep":
            return run_sweep(cfg, log=log)[0]
        if args.command == "dump-schedule":
            if args.steps is not None and args.steps < 1:
                raise ConfigError("--steps must be >= 1")
            if args.output is not None:
                out = _prepare_output(cfg.output_dir)
                with (out / "schedule.csv").open("w", newline="") as fh:
                    dump_schedule(cfg, fh, args.steps)
            else:
                dump_schedule(cfg, sys.stdout, args.steps)
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GPOError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG  # pragma: no cover
