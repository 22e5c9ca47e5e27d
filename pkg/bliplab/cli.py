"""
Command-line entry point ``bliplab``.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 data
error, 5 numerical failure.
"""

import argparse
import logging
import sys
from typing import List, Optional

from bliplab.exceptions import ConfigError, DataError, NumericalError
from bliplab.experiment import (
    RUN_MODES,
    cmd_eval,
    cmd_generate,
    cmd_predict,
    cmd_train,
    load_experiment,
    override_config,
)
from bliplab.utils.utils import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERICAL = 5


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", required=True, help="Experiment config (JSON)"
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Replace every seed"
    )
    common.add_argument(
        "--mode",
        choices=RUN_MODES,
        default=None,
        help="Uncertainty mode of the model",
    )
    common.add_argument(
        "--samples", type=int, default=None, help="MC samples S"
    )
    common.add_argument(
        "--jobs", type=int, default=1, help="Parallel workers"
    )
    common.add_argument(
        "--out", default=None, help="Experiment directory"
    )
    common.add_argument(
        "--members",
        type=int,
        default=None,
        help="Ensemble size in ensemble mode",
    )
    common.add_argument(
        "--p",
        type=float,
        default=None,
        help="Dropout probability in mc_dropout mode",
    )

    parser = argparse.ArgumentParser(
        prog="bliplab",
        description="Bayesian message passing with adaptive dropout on "
        "charged-particle dynamics",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser(
        "generate", parents=[common], help="Simulate train/val/test data"
    )
    commands.add_parser("train", parents=[common], help="Train a model")

    evaluate = commands.add_parser(
        "eval", parents=[common], help="Score checkpoints on the test split"
    )
    evaluate.add_argument(
        "--checkpoint",
        action="append",
        default=None,
        help="Checkpoint file; repeat for an ensemble",
    )
    evaluate.add_argument(
        "--predictions",
        default=None,
        help="Score an existing prediction dump instead",
    )

    predict = commands.add_parser(
        "predict", parents=[common], help="Write per-node predictions"
    )
    predict.add_argument(
        "--checkpoint",
        action="append",
        default=None,
        help="Checkpoint file; repeat for an ensemble",
    )
    predict.add_argument(
        "--input", required=True, help="Dataset file to predict on"
    )
    return parser


def run(args: argparse.Namespace):
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    config = override_config(
        load_experiment(args.config),
        seed=args.seed,
        mode=args.mode,
        samples=args.samples,
        members=args.members,
        p=args.p,
        out=args.out,
    )
    if args.command == "generate":
        cmd_generate(config, jobs=args.jobs)
    elif args.command == "train":
        cmd_train(config, jobs=args.jobs)
    elif args.command == "eval":
        cmd_eval(
            config,
            checkpoints=args.checkpoint,
            predictions=args.predictions,
            jobs=args.jobs,
        )
    else:
        cmd_predict(
            config, args.input, checkpoints=args.checkpoint, jobs=args.jobs
        )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_USAGE if exit_.code else EXIT_OK

    try:
        configure_logging()
        run(args)
    except ConfigError as error:
        logger.error("Configuration error: %s", error)
        return EXIT_CONFIG
    except DataError as error:
        logger.error("Data error: %s", error)
        return EXIT_DATA
    except NumericalError as error:
        logger.error("Numerical failure: %s", error)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
