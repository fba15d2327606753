#!/usr/bin/env python3
"""
Fracture Width Filter - Main Application Entry Point
Runs twin experiments that recover fracture widths from noisy fracture
observations, parameter sweeps, forward-only simulations and mesh dumps.

Exit codes: 0 success (or no tolerance configured), 1 recovery tolerance
missed, 2 configuration or stage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from core.constants import OUTPUT_FILES, PRESETS, SWEEP_AXES
from core.exceptions import FractureFilterError
from experiments.twin import (load_config, run_forward, run_mesh_dump,
                              run_twin, sweep)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def setup_logging(log_file: Optional[Path] = None, verbose: bool = False) -> None:
    """Console logging, plus a plain-text log file once the run directory is known."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config overrides from the command-line flags."""
    overrides: Dict[str, Any] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise FractureFilterError(f"--set expects key=value, got '{item}'")
        try:
            overrides[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.threads is not None:
        overrides["run.threads"] = args.threads
    if args.out is not None:
        overrides["run.out"] = str(args.out)
    return overrides


def parse_values(text: str) -> List[Any]:
    """Sweep values: a JSON list, or comma-separated numbers."""
    text = text.strip()
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(part) for part in text.split(",") if part.strip()]


def cmd_run(cfg) -> int:
    report = run_twin(cfg)
    if report.passed is None:
        return 0
    if not report.passed:
        logger.warning(f"Recovery tolerance {cfg.acceptance_tolerance} missed: "
                       f"relative error {report.relative_error.tolist()}")
    return 0 if report.passed else 1


def cmd_sweep(cfg, axis: str, values: List[Any]) -> int:
    result = sweep(cfg, axis, values, workers=cfg.threads)
    logger.info(f"Sweep table written to {result.path}")
    return 0


def cmd_forward(cfg) -> int:
    files = run_forward(cfg)
    for label, path in files.items():
        logger.info(f"Wrote {label}: {path}")
    return 0


def cmd_mesh_dump(cfg) -> int:
    path = run_mesh_dump(cfg)
    logger.info(f"Wrote mesh: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Fracture Width Filter - twin experiments for fracture width recovery"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Key-value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="Built-in test case")
    common.add_argument("--seed", type=int, help="Master seed (overrides run.seed)")
    common.add_argument("--threads", type=int, help="Worker threads (overrides run.threads)")
    common.add_argument("--out", type=Path, help="Output directory (overrides run.out)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="Override any config key, e.g. --set filter.particles=40")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Run one twin experiment")
    sweep_parser = sub.add_parser("sweep", parents=[common], help="Run a batch over one axis")
    sweep_parser.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_parser.add_argument("--values", required=True,
                              help="JSON list or comma-separated values, e.g. 400,800")
    sub.add_parser("mesh-dump", parents=[common], help="Write the mesh as text")
    sub.add_parser("forward-only", parents=[common], help="Simulate the truth only")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(verbose=args.verbose)

    try:
        cfg = load_config(args.config, args.preset, collect_overrides(args))
    except FractureFilterError as e:
        logger.error(f"[config] {e}")
        return 2

    setup_logging(cfg.output_dir / OUTPUT_FILES["log"], verbose=args.verbose)
    logger.info(f"Command {args.command}, case {cfg.case}, output {cfg.output_dir}")

    try:
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.axis, parse_values(args.values))
        if args.command == "forward-only":
            return cmd_forward(cfg)
        return cmd_mesh_dump(cfg)
    except FractureFilterError as e:
        logger.error(f"{e}")
        return 2
    except json.JSONDecodeError as e:
        logger.error(f"[config] Could not parse --values: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
