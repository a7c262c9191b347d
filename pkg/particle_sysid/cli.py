#!/usr/bin/env python3
"""
particle-sysid command-line interface.

Subcommands:
    run CONFIG [--set k.sub=v]... [--seed S] [--chains K] [--force] [--output-dir DIR]
    validate PATH --model ID [--format FMT]
    summarize RUN_DIR [--burn-in B] [--out FILE]
    simulate --model ID -T N --out PATH [--seed S] [--param name=value]...
    models

Exit codes:
    0 success, 1 unexpected error, 2 configuration or capability problem,
    3 degeneracy or numerical failure, 4 dataset error, 5 refused overwrite
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from .api import (
    EXIT_OK,
    EXIT_UNEXPECTED,
    exit_code_for,
    load_environment,
    run_experiment,
    summarize_run,
)
from .config import ExperimentConfig
from .core import RandomStream
from .datasets import FORMATS, simulate_dataset, validate_dataset, write_dataset
from .errors import ConfigError, OutputExistsError, SysIdError
from .systems.registry import ModelRegistry
from .utils import to_jsonable, write_json

logger = logging.getLogger("particle_sysid")


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _print_json(data) -> None:
    print(json.dumps(to_jsonable(data), indent=2, sort_keys=True))


def _report_error(error: BaseException, verbose: bool) -> int:
    code = exit_code_for(error)
    if isinstance(error, SysIdError):
        print(f"Error: {error.describe() if verbose else error}", file=sys.stderr)
    else:
        print(f"Error: {type(error).__name__}: {error}", file=sys.stderr)
        if verbose:
            logger.exception("Unexpected failure")
    return code


def cmd_run(args: argparse.Namespace) -> int:
    """Run an experiment from a config file."""
    config = ExperimentConfig.from_file(Path(args.config))
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.chains is not None:
        overrides.append(f"chains={args.chains}")
    if args.output_dir is not None:
        overrides.append(f"output_dir={args.output_dir}")
    if args.force:
        overrides.append("force=true")
    if overrides:
        config = config.apply_overrides(overrides)
    result = run_experiment(config, command=[sys.argv[0]] + list(args.argv))
    if result.status != "success":
        print(f"Run failed: {result.error['message'] if result.error else 'unknown error'}", file=sys.stderr)
        if result.error and result.error.get("context"):
            print(f"  context: {result.error['context']}", file=sys.stderr)
    if not args.quiet:
        _print_json({"status": result.status, "theta": result.theta, "metrics": result.metrics})
    return result.exit_code


def cmd_validate(args: argparse.Namespace) -> int:
    """Check a dataset against a model."""
    report = validate_dataset(Path(args.path), args.model, args.format, args.series)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace) -> int:
    """Recompute posterior summaries and IACT from a run directory."""
    summary = summarize_run(Path(args.run_dir), args.burn_in)
    if args.out:
        write_json(Path(args.out), summary)
    _print_json(summary)
    return EXIT_OK


def _parse_params(items: Optional[List[str]]) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError("Parameter must look like name=value", param=item)
        name, raw = item.split("=", 1)
        params[name.strip()] = float(yaml.safe_load(raw))
    return params


def cmd_simulate(args: argparse.Namespace) -> int:
    """Write a synthetic dataset drawn from a model."""
    options = yaml.safe_load(args.options) if args.options else {}
    model = ModelRegistry().build(args.model, **(options or {}))
    theta = model.parameters(_parse_params(args.param))
    data = simulate_dataset(model, theta, args.T, RandomStream(args.seed))
    out = Path(args.out)
    if out.exists() and not args.force:
        raise OutputExistsError("Dataset file already exists", path=str(out))
    write_dataset(data, out)
    print(f"Wrote {data.T} steps ({data.num_observed} observed) to {out}")
    return EXIT_OK


def cmd_models(args: argparse.Namespace) -> int:
    """List registered models and the algorithms they support."""
    registry = ModelRegistry()
    table = {}
    for model_id in registry.model_ids:
        if model_id == "lgss":
            continue
        model = registry.build(model_id)
        table[model_id] = {"capabilities": model.get_capabilities(),
                           "algorithms": registry.supported_algorithms(model)}
    _print_json(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="particle-sysid",
        description="Sequential Monte Carlo identification of nonlinear state-space models",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging and full error details")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings only")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_p = subparsers.add_parser("run", help="Run an experiment")
    run_p.add_argument("config", help="YAML or JSON experiment config")
    run_p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable)")
    run_p.add_argument("--seed", type=int, help="Override the seed")
    run_p.add_argument("--chains", type=int, help="Independent chains (Bayesian algorithms)")
    run_p.add_argument("--force", action="store_true", help="Overwrite an existing run directory")
    run_p.add_argument("--output-dir", help="Output root (default $PARTICLE_SYSID_OUTPUT_ROOT or ./sysid_outputs)")
    run_p.set_defaults(func=cmd_run)

    val_p = subparsers.add_parser("validate", help="Validate a dataset file")
    val_p.add_argument("path", help="Dataset CSV")
    val_p.add_argument("--model", required=True, help="Model id")
    val_p.add_argument("--format", default="auto", choices=FORMATS)
    val_p.add_argument("--series", default="est", choices=("est", "val"), help="Water-tank benchmark series")
    val_p.set_defaults(func=cmd_validate)

    sum_p = subparsers.add_parser("summarize", help="Recompute summaries from a run directory")
    sum_p.add_argument("run_dir", help="Run directory")
    sum_p.add_argument("--burn-in", type=int, default=None, help="Samples dropped per chain (default M/10)")
    sum_p.add_argument("--out", help="Also write the summary to this JSON file")
    sum_p.set_defaults(func=cmd_summarize)

    sim_p = subparsers.add_parser("simulate", help="Write a synthetic dataset")
    sim_p.add_argument("--model", required=True, help="Model id")
    sim_p.add_argument("-T", type=int, required=True, help="Number of time steps")
    sim_p.add_argument("--out", required=True, help="Output CSV")
    sim_p.add_argument("--seed", type=int, default=0)
    sim_p.add_argument("--param", action="append", metavar="NAME=VALUE", help="Parameter value (repeatable)")
    sim_p.add_argument("--options", help="Model options as a YAML mapping")
    sim_p.add_argument("--force", action="store_true", help="Overwrite an existing file")
    sim_p.set_defaults(func=cmd_simulate)

    models_p = subparsers.add_parser("models", help="List models and supported algorithms")
    models_p.set_defaults(func=cmd_models)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch, and return the exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    _setup_logging(args.verbose, args.quiet)
    load_environment()
    try:
        return args.func(args)
    except SysIdError as e:
        return _report_error(e, args.verbose)
    except Exception as e:  # noqa: BLE001
        _report_error(e, args.verbose)
        return EXIT_UNEXPECTED


def cli_main():
    """Entry point for the CLI script."""
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\nInterrupted", file=sys.stderr)
        sys.exit(130)


if __name__ == "__main__":
    cli_main()
