"""
Run or validate fault-injection campaigns.

Usage:
    python -m faultsim run campaigns/heat_lflr.json
    python -m faultsim run campaigns/ft_gmres.json --seeds 1..20 --out out/ft
    python -m faultsim run campaigns/skeptical.json --arm skeptical --db sqlite:///runs.db
    python -m faultsim validate campaigns/pipelined.json
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from faultsim.config import settings
from faultsim.errors import ConfigurationError, FaultSimError
from faultsim.services.campaign import load_config, parse_seed_range, run_campaign, validate_config

logger = logging.getLogger(__name__)


def _positive_int(raw: str) -> int:
    try:
        value = int(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected an integer, got {raw!r}") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a value >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultsim", description="Deterministic fault-injection campaigns")
    parser.add_argument("--log-level", default=settings.log_level, help="Logging level (default from FAULTSIM_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run a campaign and write its result files")
    run.add_argument("config", help="Path to a campaign JSON file")
    run.add_argument("--out", help="Output directory (default: output.dir, then FAULTSIM_OUTPUT_DIR/<name>)")
    run.add_argument("--seeds", help="Override seeds: N, A..B or A,B,C")
    run.add_argument("--arm", action="append", dest="arms", help="Only run this arm (repeatable)")
    run.add_argument("--workers", type=_positive_int, help="Worker processes (default FAULTSIM_WORKERS)")
    run.add_argument("--db", dest="database_url", help="SQLAlchemy URL to store run records in")

    validate = commands.add_parser("validate", help="Check a campaign file without running it")
    validate.add_argument("config", help="Path to a campaign JSON file")
    return parser


def _print_error(exc: FaultSimError) -> None:
    detail = exc.detail if isinstance(exc.detail, dict) else {"message": exc.detail}
    print(f"[!] {detail.get('message', exc)}", file=sys.stderr)
    for diagnostic in detail.get("diagnostics", []):
        print(f"    {diagnostic['loc']}: {diagnostic['message']}", file=sys.stderr)


def _validate(args: argparse.Namespace) -> int:
    diagnostics = validate_config(args.config)
    if not diagnostics:
        print(f"[ok] {args.config}")
        return 0
    print(f"[!] {args.config}: {len(diagnostics)} problem(s)", file=sys.stderr)
    for diagnostic in diagnostics:
        print(f"    {diagnostic.loc}: {diagnostic.message}", file=sys.stderr)
    return ConfigurationError.exit_code


def _run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    seeds = parse_seed_range(args.seeds) if args.seeds else None
    print(f"[*] campaign {config.name} ({config.experiment.value})")
    summary = run_campaign(
        config,
        out_dir=args.out,
        seeds=seeds,
        arms=args.arms,
        workers=args.workers,
        database_url=args.database_url,
    )
    for arm in summary.arms:
        print(f"    {arm.arm}: {arm.runs} runs, {arm.converged} converged, errors {json.dumps(arm.errors)}")
    print(f"[>] {summary.runs} runs written, exit code {summary.exit_code}")
    return summary.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return _validate(args)
        return _run(args)
    except FaultSimError as exc:
        _print_error(exc)
        return exc.exit_code


if __name__ == "__main__":
    raise SystemExit(main())
