"""``python -m app`` entry point: argument parsing, overrides, output and exit codes."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from typing import Any, Sequence

import yaml
from pydantic import ValidationError

from app.commands import cmd_compare, cmd_constants, cmd_generate, cmd_run
from core.config import ExperimentConfig, get_settings
from core.errors import ConfigError, FingerprintMismatchError, LabError
from core.logging import configure_logging
from core.models import Objective

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARSE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_FINGERPRINT = 5


def _seed_list(raw: str) -> list[int]:
    try:
        return [int(token) for token in raw.split(",") if token.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="permk-lab", description="Compressed distributed optimization lab")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="build a task artifact and its constants report")
    generate.add_argument("config", nargs="?")
    generate.add_argument("--out")

    run = sub.add_parser("run", help="run every (method, stepsize, seed) cell of an experiment")
    run.add_argument("config", nargs="?")
    run.add_argument("--T", type=int, dest="T")
    run.add_argument("--seeds", type=_seed_list)
    run.add_argument("--out")
    run.add_argument("--jobs", type=int)
    run.add_argument("--objective", choices=[o.value for o in Objective])

    compare = sub.add_parser("compare", help="rank traces at a per-node bit budget")
    compare.add_argument("traces", nargs="+")
    compare.add_argument("--budget", type=float, required=True, help="cumulative bits per node")
    compare.add_argument("--out", help="directory for the gnuplot .dat files")
    compare.add_argument("--no-gnuplot", action="store_true")

    constants = sub.add_parser("constants", help="print smoothness constants and complexity predictions")
    constants.add_argument("config", nargs="?")
    constants.add_argument("--format", choices=["yaml", "csv"], default="yaml")
    return parser


def apply_overrides(experiment: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    data = experiment.model_dump(mode="json", by_alias=True)
    run_updates = {
        "T": getattr(args, "T", None),
        "seeds": getattr(args, "seeds", None),
        "jobs": getattr(args, "jobs", None),
        "objective": getattr(args, "objective", None),
    }
    data["run"].update({key: value for key, value in run_updates.items() if value is not None})
    if getattr(args, "out", None):
        data["output"]["directory"] = args.out
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], field=".".join(str(p) for p in first["loc"]), path="<flags>") from exc


def _print_report(report: dict[str, Any], fmt: str) -> None:
    if fmt == "csv":
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["key", "value"])
        writer.writerows([key, "" if value is None else value] for key, value in report.items())
    else:
        sys.stdout.write(yaml.safe_dump(report, sort_keys=False))


def dispatch(args: argparse.Namespace) -> int:
    settings = get_settings()
    if args.command == "compare":
        result = cmd_compare(args.traces, args.budget, out_dir=args.out, gnuplot=not args.no_gnuplot)
        for row in result.ranking:
            value = "-" if row.value is None else f"{row.value:.6e}"
            print(f"{row.rank:>3}  {row.run_id}  {row.method}  {row.compressor}  {value}")
        return EXIT_OK

    experiment = apply_overrides(settings.load_experiment(args.config), args)
    if args.command == "generate":
        result = cmd_generate(experiment)
        print(f"task: {result.artifact}")
        print(f"report: {result.report_path}")
        return EXIT_OK
    if args.command == "constants":
        _print_report(cmd_constants(experiment), args.format)
        return EXIT_OK

    outcome = cmd_run(experiment)
    for row in outcome.rows:
        flag = "diverged" if row["diverged"] else ("best" if row["best"] else "")
        print(f"{row['run_id']}  grad_norm_sq={row['final_grad_norm_sq']}  {flag}".rstrip())
    print(f"summary: {outcome.summary_path}")
    return EXIT_DIVERGED if outcome.all_diverged else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    level: int | str = get_settings().log_level
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    configure_logging(level)

    try:
        return dispatch(args)
    except ConfigError as exc:
        logger.error(str(exc))
        return EXIT_PARSE
    except FingerprintMismatchError as exc:
        logger.error(str(exc))
        return EXIT_FINGERPRINT
    except OSError as exc:
        logger.error(f"I/O error: {exc}")
        return EXIT_IO
    except (LabError, ValidationError) as exc:
        logger.error(str(exc))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
