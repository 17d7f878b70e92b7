"""``meanstop <kind> --config <path> [--out <dir>] [--filter <name>] [--workers <n>]``.

Exit codes: 0 all checks pass, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import KINDS, ConfigError, default_workers, load_config, run_all_checks, run_experiment

ALL = "all-checks"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meanstop", description="Run a configured experiment and write its tables, plots and report.")
    p.add_argument("kind", choices=KINDS + (ALL,))
    p.add_argument("--config", type=Path, help="INI config (required except for all-checks)")
    p.add_argument("--out", type=Path, help="output directory; overrides [experiment] out")
    p.add_argument("--filter", dest="name_filter", help="all-checks: only suites whose name or kind matches")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: MEANSTOP_WORKERS or 1)")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        if args.kind == ALL:
            return _all_checks(args, workers)
        if args.config is None:
            print("error: --config is required", file=sys.stderr)
            return 2
        cfg = load_config(args.config)
        if cfg.kind != args.kind:
            print(f"error: config is for {cfg.kind!r}, not {args.kind!r}", file=sys.stderr)
            return 2
        report = run_experiment(cfg, workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or cfg.out
    if out is not None:
        report.write(out)
    for c in report.checks:
        print(c.line())
    print(f"{report.kind}: {'PASS' if report.passed else 'FAIL'} ({report.wall_clock:.1f} s)")
    return 0 if report.passed else 1


def _all_checks(args, workers: int) -> int:
    override = None
    if args.config is not None:
        try:
            override = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    result = run_all_checks(args.name_filter, workers, args.out, model_override=override)
    for rep in result.reports:
        print(f"{'PASS' if rep.passed else 'FAIL'} {rep.name} ({rep.wall_clock:.1f} s)")
    for name in result.skipped:
        print(f"SKIP {name}")
    if not result.reports and not result.skipped:
        print(f"error: no suite matches filter {args.name_filter!r}", file=sys.stderr)
        return 2
    if not result.passed:
        print("failing checks:")
        for line in result.manifest():
            print(f"  {line}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
