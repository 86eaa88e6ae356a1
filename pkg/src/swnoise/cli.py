"""Command-line entry point.

    swnoise simulate|calibrate|train|forecast|report --config FILE
            [--jobs N] [--seed S] [--toy]

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing or stale input.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import calibrate as cal
from . import dsb as dsb_mod
from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .fileio import FormatError
from .rsw import BlowUp, CflViolation

log = logging.getLogger("swnoise")

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_MISSING = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swnoise",
        description="Shallow-water transport-noise calibration workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("simulate", "run the fine and coarse deterministic models"),
        ("calibrate", "extract the streamfunction training dataset"),
        ("train", "train the generative noise model"),
        ("forecast", "run the ensemble comparison and verification metrics"),
        ("report", "summarise metrics into a one-page report"),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="key-value config file (defaults apply if omitted)")
        cmd.add_argument("--jobs", type=int, default=1, help="worker process cap")
        cmd.add_argument("--seed", type=int, help="override the config seed")
        cmd.add_argument("--workdir", help="override the config workdir")
        if name == "train":
            cmd.add_argument(
                "--toy", action="store_true",
                help="run the embedded 1-D Gaussian oracle instead of the dataset",
            )
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workdir is not None:
        cfg.workdir = args.workdir

    try:
        if args.command == "simulate":
            pipeline.cmd_simulate(cfg)
        elif args.command == "calibrate":
            pipeline.cmd_calibrate(cfg)
        elif args.command == "train":
            pipeline.cmd_train(cfg, toy=getattr(args, "toy", False))
        elif args.command == "forecast":
            pipeline.cmd_forecast(cfg, jobs=args.jobs)
        elif args.command == "report":
            pipeline.cmd_report(cfg)
    except (ConfigError, CflViolation) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (pipeline.MissingInput, pipeline.StaleInput, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except (BlowUp, dsb_mod.Diverged, cal.DegenerateOperator, FloatingPointError,
            FormatError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
