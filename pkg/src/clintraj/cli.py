"""Command-line entry point: subcommands, shared flags, exit codes.

Exit status is 0 on success, 1 for user-correctable problems (bad
usage, invalid config, missing files or artifacts, data that fails
validation) and 2 for internal errors.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from . import pipeline
from .dataset import SchemaError

_STAGE_HELP = {
    "quantify": "load, filter and numerically quantify the raw table",
    "impute": "fill residual missing cells by SVD projection",
    "reduce": "standardize and project onto leading principal components",
    "fit": "grow a principal tree on the point cloud",
    "segment": "split the tree into non-branching segments",
    "pseudotime": "select the root and assign pseudotime",
    "associate": "screen variables against pseudotime and segments",
    "survival": "cumulative hazards along trajectories",
    "layout": "draw the tree and points as SVG",
    "all": "run every stage in order",
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Usage mistakes are user errors (exit 1), not internal ones.
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="clintraj",
        description="Principal-tree trajectory analysis of mixed clinical tables.",
    )
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True
    for name, text in _STAGE_HELP.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", required=True, help="path to the JSON config file")
        p.add_argument(
            "--seed", type=int, default=None, help="override the config seed"
        )
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        cfg = pipeline.load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "all":
            for stage, names in pipeline.run_all(cfg).items():
                print(f"{stage}: wrote {', '.join(names)}")
        else:
            names = pipeline.run_stage(args.command, cfg)
            print(f"{args.command}: wrote {', '.join(names)}")
    except (pipeline.PipelineError, SchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
