#!/usr/bin/env python3
"""
Command-line front end.

    python -m kdkit train-teacher --config configs/distill_patterns.json
    python -m kdkit distill       --config configs/distill_patterns.json --seed 3
    python -m kdkit sweep         --config configs/sweep_grid.json --jobs 4
    python -m kdkit size          --budget-params 6200000
    python -m kdkit report        runs/grid/summary.csv --compare runs/grid_rerun/summary.csv
    python -m kdkit pipeline      --config configs/pipeline_patterns.json

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration,
3 divergence (non-finite loss).
"""
import argparse
import sys
from typing import List, Optional

from kdkit.config import SizeConfig, load_config
from kdkit.errors import ConfigError, DivergenceError, KDError, NumericalError
from kdkit.experiments import run_distill, run_init_student, run_report, run_size, run_sweep, run_train_teacher
from kdkit.workflow import run_pipeline

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdkit", description="Knowledge distillation for transformer encoders")
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment(name: str, help_text: str, config_required: bool = True) -> argparse.ArgumentParser:
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--config", required=config_required, help="experiment config (JSON)")
        command.add_argument("--seed", type=int, help="override the config seed")
        command.add_argument("--out", help="override the output directory")
        command.add_argument("--jobs", type=int, default=1, help="parallel experiment contexts")
        command.add_argument("--quiet", action="store_true", help="no progress output")
        return command

    experiment("train-teacher", "train and save the teacher")
    experiment("init-student", "initialize and save the student")
    experiment("distill", "one distillation run")
    experiment("sweep", "run every cell of the configured sweep")
    experiment("pipeline", "train-teacher, init-student, distill and report in one go")

    size = experiment("size", "widest encoder per depth under a parameter or FLOP budget", config_required=False)
    size.add_argument("--budget-params", type=float, help="parameter budget")
    size.add_argument("--budget-flops", type=float, help="FLOP budget (needs --n)")
    size.add_argument("--n", type=int, help="sequence length for FLOP counting")
    size.add_argument("--depths", type=_int_list, help="comma-separated layer counts")
    size.add_argument("--widths", type=_int_list, help="comma-separated hidden widths")
    size.add_argument("--vocab-size", type=int, help="vocabulary size")
    size.add_argument("--tolerance", type=float, help="allowed budget overshoot (fraction)")

    report = experiment("report", "summarize a summary CSV", config_required=False)
    report.add_argument("summary", help="summary.csv to report on")
    report.add_argument("--compare", help="another summary.csv to diff against")
    report.add_argument("--export-task", help="write the config's task dataset to this TSV path")
    return parser


def _size_config(args: argparse.Namespace) -> SizeConfig:
    size = load_config(args.config).size if args.config else SizeConfig()
    if args.budget_params is not None:
        size.budget = {"params": args.budget_params}
    elif args.budget_flops is not None:
        size.budget = {"flops": args.budget_flops}
    if args.n is not None:
        size.n = args.n
        if "flops" in size.budget:
            size.budget["n"] = args.n
    if args.depths:
        size.depths = args.depths
    if args.widths:
        size.widths = args.widths
    if args.vocab_size is not None:
        size.vocab_size = args.vocab_size
    if args.tolerance is not None:
        size.tolerance = args.tolerance
    return size


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "size":
        run_size(_size_config(args), args.out, verbose=not args.quiet)
        return EXIT_OK

    config = None
    if args.config:
        config = load_config(args.config).with_overrides(seed=args.seed, out=args.out,
                                                         verbose=False if args.quiet else None)
    if args.command == "report":
        run_report(args.summary, args.compare, config, args.export_task)
        return EXIT_OK
    if args.command == "train-teacher":
        run_train_teacher(config)
    elif args.command == "init-student":
        run_init_student(config)
    elif args.command == "distill":
        run_distill(config)
    elif args.command == "sweep":
        summary = run_sweep(config, args.jobs)
        if "status" in summary and (summary["status"] != "ok").any():
            return EXIT_DIVERGED
    elif args.command == "pipeline":
        if not run_pipeline(config):
            return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"❌ Invalid configuration ({len(exc.messages)} problem(s)):", file=sys.stderr)
        for message in exc.messages:
            print(f"   • {message}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericalError) as exc:
        print(f"❌ Training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except KDError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
