# =========================================
# file: app.py
# =========================================
from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Optional, Sequence

from tools.sv_commands import (
    USAGE_ERRORS,
    cmd_eval,
    cmd_experiment,
    cmd_fuse,
    cmd_gen_corpus,
    cmd_gradcheck,
    cmd_train,
)
from tools.sv_config import SYSTEMS

logger = logging.getLogger("metasv")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_config_flags(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--config", required=required, help="run-config JSON document")
    p.add_argument("--seed", type=int, default=None, help="override the top-level seed")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable; value parsed as JSON)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metasv",
        description="Meta-learning speaker-verification training and evaluation on synthetic data.",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    # -------------------------
    # Data
    # -------------------------
    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus file")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="corpus file to write")
    p.add_argument("--trials-out", default=None, help="also write held-out trial lists (one per condition)")
    p.set_defaults(handler=cmd_gen_corpus)

    # -------------------------
    # Training
    # -------------------------
    p = sub.add_parser("train", help="train one system")
    p.add_argument("--system", required=True, choices=SYSTEMS)
    _add_config_flags(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--metrics-out", default=None, help="per-step CSV (default: <out stem>.metrics.csv)")
    p.add_argument("--stage2-only", action="store_true", help="run only the second stage of a two-stage system")
    p.add_argument("--init-checkpoint", default=None, help="stage-1 checkpoint for --stage2-only")
    p.add_argument("--plot", action="store_true", help="write loss.html next to the checkpoint")
    p.set_defaults(handler=cmd_train)

    # -------------------------
    # Evaluation
    # -------------------------
    p = sub.add_parser("eval", help="score a trial list with a checkpoint")
    _add_config_flags(p, required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="metrics JSON to write")
    p.add_argument("--scores-out", default=None, help="score file (default: <out stem>.scores.txt)")
    p.add_argument("--system", default=None, help="system label in the metrics (default: checkpoint stem)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("fuse", help="equal-weight fusion of two score files")
    _add_config_flags(p, required=False)
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--out", required=True, help="fused score file to write")
    p.add_argument("--trials", default=None, help="labeled trial list; enables metrics")
    p.add_argument("--metrics-out", default=None, help="metrics JSON (default: <out stem>.metrics.json)")
    p.add_argument("--system", default="fusion")
    p.set_defaults(handler=cmd_fuse)

    # -------------------------
    # Matrix / checks
    # -------------------------
    p = sub.add_parser("experiment", help="run every configured system over every configured seed")
    _add_config_flags(p)
    p.add_argument("--out-dir", default=None, help="output directory (default: config output_dir)")
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive, loss and forward path")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except USAGE_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
