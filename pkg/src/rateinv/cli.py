"""Command-line front door: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. --deterministic pins the numeric libraries to one thread (set
before they are imported), which together with the seed makes end-to-end
runs bit-reproducible on one machine.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

STAGES = ("synth", "augment", "featurize", "train", "extract", "score", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rateinv",
        description="Speaking-rate-invariant speaker embedding pipeline",
    )
    sub = parser.add_subparsers(dest="stage", required=True, metavar="|".join(STAGES))
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--workdir", default=None, help="override the config workdir")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded numerics for bit-reproducible runs")
        p.add_argument("--force", action="store_true",
                       help="rerun the stage even if its inputs are unchanged")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, "1")
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    from . import pipeline
    from .config import load_config
    from .errors import ConfigError, DataError, NumericalError

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        result = pipeline.run_stage(args.stage, cfg, workdir=args.workdir, force=args.force)
        if args.stage == "report" and result:
            sys.stdout.write(result)
        return 0
    except (ConfigError, ValueError) as exc:
        logging.error("%s", exc)
        return 1
    except DataError as exc:
        logging.error("%s", exc)
        return 2
    except NumericalError as exc:
        logging.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
