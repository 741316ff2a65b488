"""Command-line entry point.

Usage: rankmask-lab <analysis> [--config FILE] [--seeds 1,2,3] [--out DIR]
       [--set key=value ...]

Subcommands mirror the analyses plus `train` and `default-config`. Any
config key can be overridden from the command line with --set. Exit code
is 0 on success; failures write a machine-readable JSON error record to
stderr (and error.json in the output directory when possible).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .errors import ConfigError
from .harness import ANALYSES, run_analysis

_COMMANDS = sorted(ANALYSES) + ["train", "default-config"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankmask-lab",
        description="Desk-scale analyses of learnable passage-mask regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} command")
        if name == "default-config":
            p.add_argument("--out", default="-", help="file to write the default config to ('-' = stdout)")
            continue
        p.add_argument("--config", default=None, help="key-value config file")
        p.add_argument("--seeds", default=None, help="comma-separated replicate seeds")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override any config key (repeatable)",
        )
    return parser


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    overrides = list(args.overrides)
    if args.seeds:
        overrides.append(f"seeds={args.seeds}")
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _fail(exc: Exception, out_dir=None) -> int:
    record = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    sys.stderr.write(json.dumps(record) + "\n")
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as fh:
                json.dump(record, fh, indent=2)
        except OSError:
            pass
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-config":
        if args.out == "-":
            sys.stdout.write(__import__("rankmask_lab.config", fromlist=["config_to_text"]).config_to_text(ExperimentConfig()))
        else:
            save_config(ExperimentConfig(), args.out)
        return 0
    try:
        config = _resolve_config(args)
        report = run_analysis(args.command, config, args.out)
    except (ConfigError, OSError, ValueError, RuntimeError) as exc:
        return _fail(exc, getattr(args, "out", None))
    sys.stdout.write(f"{args.command}: wrote {len(report.artifacts)} artifacts to {args.out}\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
