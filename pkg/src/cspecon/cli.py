"""Command line entry points: run one configuration, sweep a grid, or
post-process a finished run directory."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .harness import (
    analyze_directory,
    format_number,
    run_config_from_text,
    run_to_artifacts,
    sweep_config_from_text,
    sweep_to_artifacts,
)


def _read_text(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _default_out(config_path: str, suffix: str) -> str:
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join(os.path.dirname(config_path) or ".", stem + suffix)


def _resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("CSPECON_THREADS", "").strip()
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise SystemExit(f"CSPECON_THREADS must be an integer, got {env!r}") from exc
    return 1


def _cmd_run(args) -> int:
    cfg = run_config_from_text(_read_text(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.emit_full_series:
        cfg = replace(cfg, emit_full_series=True)
    out = args.out or _default_out(args.config, ".out")
    summary = run_to_artifacts(cfg, out)
    print(f"run complete: {out}")
    if summary is not None:
        print(f"regime = {summary.regime}")
        print(f"mean_zema = {format_number(summary.mean_zema)}")
        print(f"mean_z = {format_number(summary.mean_z)}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = sweep_config_from_text(_read_text(args.config))
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if args.emit_full_series:
        cfg = replace(cfg, base=replace(cfg.base, emit_full_series=True))
    out = args.out or _default_out(args.config, ".sweep")
    threads = _resolve_threads(args.threads)
    if threads < 1:
        raise SystemExit("--threads must be >= 1")
    path = sweep_to_artifacts(cfg, out, threads=threads)
    print(f"sweep complete: {path}")
    print(f"cells = {len(cfg.values) * cfg.replicates}")
    return 0


def _cmd_analyze(args) -> int:
    report = analyze_directory(args.dir)
    print(f"analysis complete: {os.path.join(args.dir, 'analysis.json')}")
    print(f"regime = {report['regime']}")
    for key in ("mean_zema", "max_zema", "price_demand_corr"):
        value = report.get(key)
        if isinstance(value, float):
            print(f"{key} = {format_number(value)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csp-econ",
        description="Deterministic market simulator: runs, sweeps, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configuration file")
    p_run.add_argument("config", help="flat key=value configuration file")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument(
        "--emit-full-series", action="store_true", help="also write per-good series"
    )
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a value grid with replicates")
    p_sweep.add_argument("config", help="sweep configuration file")
    p_sweep.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_sweep.add_argument("--out", default=None, help="output directory")
    p_sweep.add_argument(
        "--threads",
        type=int,
        default=None,
        help="parallel cells (default: CSPECON_THREADS or 1)",
    )
    p_sweep.add_argument(
        "--emit-full-series", action="store_true", help="also write per-good series"
    )
    p_sweep.set_defaults(func=_cmd_sweep)

    p_an = sub.add_parser("analyze", help="post-process a finished run directory")
    p_an.add_argument("dir", help="directory written by the run subcommand")
    p_an.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
