"""``progfd`` command line: run, sweep, tables, validate, calibrate.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .allocator import AllocationInfeasible
from .config import ConfigError, config_hash, config_to_dict, load_config, scenario_path
from .metrics import (
    magnitude_grid,
    nis_samples,
    roc_and_accuracy_sweep,
    summary_rows,
    write_allocation_csv,
    write_roc_csv,
    write_steps_csv,
    write_summary_csv,
    write_sweep_csv,
)
from .qp import dump_problem
from .simulator import FaultKind, run_scenario

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _versions() -> dict:
    import scipy
    import yaml

    return {
        "progfd": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
    }


def _prepare_outputs(out_dir: Path, names, force: bool) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / n for n in names]
    clash = [p for p in paths if p.exists() and p.suffix == ".csv"]
    if clash and not force:
        raise UsageError(f"refusing to overwrite {clash[0]} (pass --force)")
    return paths


def _load(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(args.config, overrides)


def _write_manifest(path: Path, command: str, cfg, args, files, timing: dict) -> None:
    manifest = {
        "command": command,
        "config_path": str(args.config),
        "overrides": list(args.set or []),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": _versions(),
        "files": [p.name for p in files],
        "timing": timing,
        "config": config_to_dict(cfg),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt_cell(v) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def _print_table(rows, fields) -> None:
    cells = [[_fmt_cell(r[f]) for f in fields] for r in rows]
    widths = [max(len(f), *(len(c[j]) for c in cells)) for j, f in enumerate(fields)]
    print("  ".join(f.ljust(w) for f, w in zip(fields, widths)))
    for c in cells:
        print("  ".join(v.ljust(w) for v, w in zip(c, widths)))


# --- verbs ------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(args.output or Path("out") / cfg.name)
    files = _prepare_outputs(out, ["steps.csv", "allocation.csv", "summary.csv", "manifest.json"], args.force)
    t0 = time.perf_counter()
    try:
        log = run_scenario(cfg)
    except AllocationInfeasible as exc:
        dump = out / "allocation_failure.qp"
        if exc.problem is not None:
            dump_problem(exc.problem.qp, dump)
        print(f"error: {exc} at step {getattr(exc, 'step', '?')}; problem written to {dump}", file=sys.stderr)
        return EXIT_RUNTIME
    wall = time.perf_counter() - t0
    rows = summary_rows(log)
    write_steps_csv(files[0], log)
    write_allocation_csv(files[1], log)
    write_summary_csv(files[2], rows)
    solves = log.qp_time[log.solved]
    timing = {
        "wall_s": wall,
        "detector_us_per_step_mean": float(log.detector_time.mean() * 1e6),
        "qp_solves": int(log.solved.sum()),
        "qp_ms_mean": float(solves.mean() * 1e3) if solves.size else None,
        "qp_ms_max": float(solves.max() * 1e3) if solves.size else None,
    }
    _write_manifest(files[3], "run", cfg, args, files, timing)
    _print_table(rows, list(rows[0].keys()))
    print(f"wrote {', '.join(str(p) for p in files)}")
    return EXIT_OK


def _sweep_outputs(out: Path, res, prefix: str, force: bool) -> list[Path]:
    names = [f"{prefix}accuracy.csv"] + [f"{prefix}roc_{m:g}.csv" for m in res.magnitudes]
    paths = _prepare_outputs(out, names, force)
    write_sweep_csv(paths[0], res)
    for j, p in enumerate(paths[1:]):
        write_roc_csv(p, res, j)
    return paths


def cmd_sweep(args) -> int:
    cfg = _load(args)
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if len(cfg.faults) != 1:
        raise UsageError("sweep needs a config carrying exactly one fault to scale")
    kind = cfg.faults[0].kind
    if args.kind and FaultKind(args.kind) is not kind:
        raise UsageError(f"--kind {args.kind} does not match the config fault {kind.value}")
    lo, hi, step = args.range
    try:
        mags = magnitude_grid(lo, hi, step)
    except ValueError as exc:
        raise UsageError(f"--range: {exc}") from None
    out = Path(args.output or Path("out") / f"{cfg.name}_sweep")
    _prepare_outputs(out, ["accuracy.csv"], args.force)
    t0 = time.perf_counter()
    res = roc_and_accuracy_sweep(cfg, kind, mags, args.runs, jobs=args.jobs)
    wall = time.perf_counter() - t0
    paths = _sweep_outputs(out, res, "", args.force)
    manifest = out / "manifest.json"
    _write_manifest(manifest, "sweep", cfg, args, paths, {"wall_s": wall, "runs": len(mags) * args.runs})
    rows = [
        {"magnitude": m, "accuracy": res.accuracy[j], "detection_rate": res.detection_rate[j],
         "median_delay": res.median_delay[j], "auc": res.auc[j]}
        for j, m in enumerate(res.magnitudes)
    ]
    _print_table(rows, list(rows[0].keys()))
    print(f"wrote {len(paths)} CSV files to {out}")
    return EXIT_OK


def cmd_tables(args) -> int:
    out = Path(args.output or "out/tables")
    _prepare_outputs(out, ["noise_summary.csv", "bias_summary.csv"], args.force)
    written = []
    for name, fname in (("noise", "noise_summary.csv"), ("bias", "bias_summary.csv")):
        cfg = load_config(scenario_path(name))
        rows = summary_rows(run_scenario(cfg))
        write_summary_csv(out / fname, rows)
        written.append(out / fname)
        print(f"{name} scenario summary")
        _print_table(rows, list(rows[0].keys()))
    plan = (
        ("noise", "noise_sweep_", magnitude_grid(0.0070, 0.0130, 0.0004), args.runs_noise),
        ("bias", "bias_sweep_", magnitude_grid(0.0, 0.044, 0.004), args.runs_bias),
    )
    for name, prefix, mags, runs in plan:
        cfg = load_config(scenario_path(name))
        res = roc_and_accuracy_sweep(cfg, cfg.faults[0].kind, mags, runs, jobs=args.jobs)
        written += _sweep_outputs(out, res, prefix, args.force)
        print(f"{name} accuracy sweep ({runs} runs per magnitude)")
        rows = [{"magnitude": m, "accuracy_pct": 100 * a, "auc": u} for m, a, u in zip(mags, res.accuracy, res.auc)]
        _print_table(rows, ["magnitude", "accuracy_pct", "auc"])
    print(f"wrote {len(written)} CSV files to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    bad = 0
    for path in args.configs:
        try:
            load_config(path, args.set or [])
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            bad += 1
        else:
            print(f"ok: {path}")
    return EXIT_USAGE if bad else EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load(args)
    if cfg.faults:
        raise UsageError("calibrate needs a fault-free config; remove the faults section")
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    if cfg.sigma_xy == 0:
        print("warning: sigma_xy is 0, so the measurement variance is degenerate and NIS is not meaningful",
              file=sys.stderr)
    per_robot: dict[int, list] = {}
    lag1_num = lag1_den = 0.0
    for seed in range(args.runs):
        log = run_scenario(replace(cfg, seed=seed))
        w = cfg.detector.window_w
        for i in range(cfg.N):
            vals = nis_samples(log, i)
            if vals.size:
                per_robot.setdefault(i, []).append(vals)
            mask = (log.stream_age[:, i] > w) & np.isfinite(log.innovation[:, i])
            e = log.innovation[:, i]
            pair = mask[1:] & mask[:-1] & (log.stream_age[1:, i] > log.stream_age[:-1, i])
            lag1_num += float((e[1:][pair] * e[:-1][pair]).sum())
            lag1_den += float((e[mask] ** 2).sum())
    rows = []
    pooled = []
    for i in sorted(per_robot):
        v = np.concatenate(per_robot[i])
        pooled.append(v)
        rows.append({"robot": i, "samples": int(v.size), "nis_mean": float(v.mean()), "nis_std": float(v.std(ddof=1))})
    if not rows:
        raise UsageError("no post-burn-in NIS samples; lengthen the run")
    allv = np.concatenate(pooled)
    mean = float(allv.mean())
    _print_table(rows, ["robot", "samples", "nis_mean", "nis_std"])
    lag1 = lag1_num / lag1_den if lag1_den > 0 else float("nan")
    print(f"pooled NIS mean {mean:.4f}, std {allv.std(ddof=1):.4f}, lag-1 innovation autocorrelation {lag1:+.4f}")
    print(f"suggested Q scale factor: {mean:.4f} (multiply estimator.Q0_base by this)")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------


def _range(text: str):
    parts = text.replace(",", ":").split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected LO:HI:STEP")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("range bounds must be numbers") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progfd", description="Progress-based fault detection with health-aware allocation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, output=True):
        sp.add_argument("config", help="scenario YAML file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dot-path override, repeatable")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if output:
            sp.add_argument("-o", "--output", help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite existing CSV files")

    sp = sub.add_parser("run", help="simulate one scenario and write CSV logs")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="accuracy and ROC over a fault-magnitude range")
    common(sp)
    sp.add_argument("--kind", choices=[k.value for k in FaultKind], help="expected fault kind (checked against the config)")
    sp.add_argument("--range", type=_range, required=True, metavar="LO:HI:STEP")
    sp.add_argument("--runs", type=int, default=30, help="seeds per magnitude")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("tables", help="regenerate the summary and accuracy tables from the shipped scenarios")
    sp.add_argument("-o", "--output", help="output directory")
    sp.add_argument("--force", action="store_true")
    sp.add_argument("--runs-noise", type=int, default=30)
    sp.add_argument("--runs-bias", type=int, default=50)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_tables)

    sp = sub.add_parser("validate", help="check config files")
    sp.add_argument("configs", nargs="+")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("calibrate", help="NIS calibration report for a fault-free config")
    common(sp, output=False)
    sp.add_argument("--runs", type=int, default=30)
    sp.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
