"""fixturelab command line: run the full experiment or the alpha-0 self-test."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .pipeline import (
    LabConfig,
    PipelineFailure,
    alpha_zero_selftest,
    run_pipeline,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fixturelab",
        description="Train toy base/instruct/continually-pretrained checkpoints "
                    "and verify residual portability through the resforge CLI.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, merge, evaluate, assert")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workdir", type=Path, required=True)
    run.add_argument("--alpha", type=float, default=1.0)

    selftest = sub.add_parser(
        "selftest", help="verify the harness detects a no-op merge (alpha=0)"
    )
    selftest.add_argument("--seed", type=int, default=0)
    selftest.add_argument("--workdir", type=Path, required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = LabConfig()
    try:
        if args.command == "run":
            result = run_pipeline(args.seed, args.workdir, config, alpha=args.alpha)
        else:
            result = alpha_zero_selftest(args.seed, args.workdir, config)
    except PipelineFailure as failure:
        sys.stderr.write(str(failure) + "\n")
        return 1
    sys.stdout.write(result.to_markdown())
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
