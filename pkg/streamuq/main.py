"""
StreamUQ Command Line

Uncertainty-guided online ensembles for drifting shot streams.

    python main.py gen      --config configs/example.toml --out results/
    python main.py pretrain --config configs/example.toml
    python main.py run      --config configs/example.toml --strategies static,uq_ensemble --trials 3
    python main.py report   --out results/

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from core.config import ALL_STRATEGIES, load_experiment_config, settings
from core.errors import StreamUQError, UsageError
from core.tracing import init_sentry

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def parse_strategies(value: str) -> List[str]:
    names = [name.strip() for name in value.split(",") if name.strip()]
    unknown = [name for name in names if name not in ALL_STRATEGIES]
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"unknown strategies {unknown}; choose from {', '.join(ALL_STRATEGIES)}"
        )
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamuq",
        description="Online ensemble learning with calibrated uncertainty on drifting shot streams",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def experiment_command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, required=True, help="experiment TOML file")
        sub.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sub.add_argument("--seed", type=int, help="master seed (re-derives trial seeds)")
        sub.add_argument("--strategies", type=parse_strategies, help="comma-separated strategy list")
        sub.add_argument("--trials", type=int, help="number of trials")
        return sub

    experiment_command("gen", "write the configured synthetic stream as CSV")
    experiment_command("pretrain", "train and checkpoint the base model")
    experiment_command("run", "stream shots through every strategy and trial")

    report = commands.add_parser("report", help="re-summarize an existing results directory")
    report.add_argument("--out", type=Path, help="results directory")
    report.add_argument("--config", type=Path, help="experiment TOML file (supplies output_dir)")
    report.add_argument("--strategies", type=parse_strategies, help="comma-separated strategy list")
    return parser


def dispatch(args: argparse.Namespace) -> None:
    # imported here so --help stays fast
    from services.experiment import cmd_gen, cmd_pretrain, cmd_report, cmd_run

    if args.command == "report":
        if args.out is None and args.config is None:
            raise UsageError("report needs --out or --config")
        out = args.out if args.out is not None else load_experiment_config(args.config).output_dir
        rows = cmd_report(out, args.strategies)
        for row in rows:
            logger.info(f"📊 {row['strategy']}: MAE {row['mae_mean']:.5f} ± {row['mae_std']:.5f}")
        return

    config = load_experiment_config(args.config).with_overrides(
        output_dir=args.out,
        master_seed=args.seed,
        strategies=args.strategies,
        trials=args.trials,
    )
    if args.command == "gen":
        cmd_gen(config)
    elif args.command == "pretrain":
        cmd_pretrain(config)
    elif args.command == "run":
        outcome = cmd_run(config)
        for row in outcome.summary:
            logger.info(f"📊 {row['strategy']}: MAE {row['mae_mean']:.5f} ± {row['mae_std']:.5f}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return int(e.code or 0)

    init_sentry(settings.SENTRY_DSN, settings.ENVIRONMENT)
    try:
        dispatch(args)
    except StreamUQError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"❌ I/O error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
