"""Command-line entry point.

    thermosyphon-da <command> [--config PATH] [--seed N] [--out-dir DIR] [--jobs N]

Exit status: 0 on success, 2 for configuration errors, 3 for unrecovered
numerical failures.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import numkernel as nk
from ..filters import FilterError
from ..flatconfig import ConfigError
from ..models import RingBlowUpError
from .config import ExperimentConfig, load_config
from .experiments import EXPERIMENTS
from .report import emit_report

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("thermosyphon_da")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thermosyphon-da", description="Convection-loop data assimilation experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in EXPERIMENTS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", type=Path, help="flat key = value file, or a manifest.json to re-run")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-dir", type=Path, default=None, help="output directory (default: out/<command>)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key, e.g. --set run.cycles=500")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return cfg.with_(**overrides) if overrides else cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out_dir or Path("out") / args.command
    t0 = time.perf_counter()
    try:
        result = EXPERIMENTS[args.command](cfg, args.jobs)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (nk.IntegrationError, RingBlowUpError, FilterError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    wall = time.perf_counter() - t0
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, writer in result.files.items():
            writer(out_dir / name)
        manifest = emit_report(out_dir, args.command, cfg, result.tables, wall, result.results, list(result.files))
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.command}: wrote {len(result.tables) + len(result.files)} file(s) and {manifest}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
