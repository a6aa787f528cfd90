"""Command-line entry point.

Subcommands: ``run`` (one pipeline end-to-end), ``sweep`` (one child run per
axis value plus a combined report), ``report`` (re-export a report bundle from
finished run directories), ``validate-config``. Configs are files or the name
of a shipped preset (see ``admmprune/configs/``); ``--set KEY=VALUE`` edits
any schema key. Exit status is 0 only if every requested stage completed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

from .config import RunConfig, load_config
from .diagnostics import export_report
from .errors import AdmmPruneError, ConfigError
from .pipeline import load_run_record, run_pipeline


def _preset_names() -> list[str]:
    files = resources.files("admmprune").joinpath("configs")
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def _resolve_config_text(path: str) -> str:
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return f.read()
    name = path[:-4] if path.endswith(".cfg") else path
    packaged = resources.files("admmprune").joinpath("configs", f"{name}.cfg")
    if packaged.is_file():
        return packaged.read_text(encoding="utf-8")
    raise ConfigError(
        f"config {path!r} is neither a file nor a preset; presets: {_preset_names()}")


def _load(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return load_config(_resolve_config_text(args.config), overrides, is_text=True)


def _fail(run_dir: str | None, error: Exception, stage: str = "") -> None:
    payload = {"error": type(error).__name__, "message": str(error)}
    if stage:
        payload["stage"] = stage
    line = json.dumps(payload)
    if run_dir and os.path.isdir(run_dir):
        with open(os.path.join(run_dir, "error.json"), "w", encoding="utf-8") as f:
            f.write(line + "\n")
    print(line, file=sys.stderr)


def _cmd_run(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as e:
        _fail(None, e)
        return 2
    run_dir = os.path.join(args.out, cfg.resolved_run_id())
    if os.path.exists(run_dir):
        _fail(None, ConfigError(f"run directory already exists: {run_dir}"))
        return 2
    os.makedirs(run_dir)
    try:
        _, record = run_pipeline(cfg, out_dir=run_dir)
    except AdmmPruneError as e:
        _fail(run_dir, e)
        return 1
    print(f"run {record.run_id}: final_accuracy="
          f"{record.summary.get('final_accuracy'):.4f} -> {run_dir}")
    return 0


def _sweep_child(cfg_text: str, run_dir: str) -> str:
    """Run one sweep child; returns '' on success, the error line otherwise.

    Top-level so a process pool can pickle it.
    """
    try:
        cfg = load_config(cfg_text, is_text=True)
        os.makedirs(run_dir, exist_ok=True)
        run_pipeline(cfg, out_dir=run_dir)
        return ""
    except Exception as e:  # a child must never kill the sweep
        _fail(run_dir, e)
        return f"{type(e).__name__}: {e}"


def _cmd_sweep(args) -> int:
    try:
        base = _load(args)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("sweep needs at least one value")
        seen = []
        for v in values:
            if v in seen:
                print(f"warning: duplicate sweep value {v!r} ignored", file=sys.stderr)
            else:
                seen.append(v)
        jobs = []
        for v in seen:
            if args.axis == "ratio":
                rate = float(v) / 100.0 if float(v) > 1.0 else float(v)
                override = f"prune.rate={rate}"
            else:
                override = f"criterion={v}"
            cfg = load_config(base.to_text(), [override, "run_id="], is_text=True)
            jobs.append((cfg.to_text(), os.path.join(args.out, cfg.resolved_run_id())))
    except ConfigError as e:
        _fail(None, e)
        return 2

    failures = []
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for (text, run_dir), err in zip(jobs, pool.map(
                    _sweep_child, [t for t, _ in jobs], [d for _, d in jobs])):
                if err:
                    failures.append((run_dir, err))
    else:
        for text, run_dir in jobs:
            err = _sweep_child(text, run_dir)
            if err:
                failures.append((run_dir, err))

    done = [d for _, d in jobs if not any(d == f[0] for f in failures)]
    if done:
        records = [load_run_record(d) for d in done]
        export_report(records, os.path.join(args.out, "report"))
        print(f"sweep report -> {os.path.join(args.out, 'report')}")
    for run_dir, err in failures:
        print(f"failed: {run_dir}: {err}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_report(args) -> int:
    records = []
    missing = []
    for d in args.run_dirs:
        try:
            records.append(load_run_record(d))
        except FileNotFoundError:
            missing.append(d)
    if missing:
        _fail(None, AdmmPruneError(f"incomplete run directories: {missing}"))
        return 1
    export_report(records, args.out)
    print(f"report -> {args.out}")
    return 0


def _cmd_validate(args) -> int:
    try:
        cfg = _load(args)
    except ConfigError as e:
        print(f"invalid: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(cfg.to_text())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="admmprune",
        description="Single-shot channel pruning experiments (sparsity training, "
                    "criterion baselines, surgery, reports).")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed=True):
        p.add_argument("--config", required=True,
                       help="config file path or preset name")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override a config key (repeatable)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the seed")

    p = sub.add_parser("run", help="execute one configured pipeline end-to-end")
    add_common(p)
    p.add_argument("--out", default="runs", help="parent directory for run output")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run one child per axis value, then report")
    add_common(p)
    p.add_argument("--axis", choices=("criterion", "ratio"), required=True)
    p.add_argument("--values", required=True,
                   help="comma-separated values (ratios accept percents)")
    p.add_argument("--out", default="runs", help="parent directory for child runs")
    p.add_argument("--parallel", type=int, default=1, metavar="K",
                   help="worker processes for child runs")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="export a combined report from run dirs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("validate-config", help="validate and print the resolved config")
    add_common(p)
    p.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
