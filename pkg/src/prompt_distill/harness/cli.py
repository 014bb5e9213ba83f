"""Command line: one subcommand per stage plus the full pipeline, ablations and reports.

Every config key can be overridden as ``--section.key value``. Exit status
is 0 on success, 1 on a configuration error and 2 when a stage fails.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from ..errors import ConfigError, PromptDistillError
from .ablation import AXES, run_ablation
from .config import ALIASES, known_keys, parse_config
from .pipeline import run_dir, run_pipeline

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2

STAGE_COMMANDS = {"pretrain": ("stage1",), "cache": ("cache",), "distill": ("stage2",),
                  "eval": ("eval",), "pipeline": ("stage1", "cache", "stage2", "eval")}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    parser = argparse.ArgumentParser(prog="prompt-distill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGE_COMMANDS, "ablate", "report"):
        p = sub.add_parser(name, parents=[common], help=f"run the {name} step")
        p.add_argument("--config", type=Path, help="key = value config file")
        if name in STAGE_COMMANDS:
            p.add_argument("--resume", action="store_true",
                           help="reuse existing artifacts whose fingerprints match")
        if name == "ablate":
            p.add_argument("--axis", required=True, choices=sorted(AXES))
            p.add_argument("--fresh", action="store_true", help="ignore artifacts of earlier runs")
        if name == "report":
            p.add_argument("--csv", action="store_true", help="print the CSV instead of the table")
    return parser


def split_overrides(argv: Sequence[str]) -> tuple[list[str], dict[str, str]]:
    """Separate ``--section.key value`` pairs from the regular arguments."""
    rest, flags = [], {}
    known = set(known_keys()) | set(ALIASES)
    i = 0
    argv = list(argv)
    while i < len(argv):
        arg = argv[i]
        if arg.startswith("--") and arg[2:].split("=", 1)[0] in known - {"config"}:
            key, eq, value = arg[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise ConfigError(f"--{key} needs a value")
                value = argv[i + 1]
                i += 1
            flags[key] = value
        elif arg.startswith("--") and "." in arg[2:].split("=", 1)[0]:
            raise ConfigError(f"unknown config key {arg[2:].split('=', 1)[0]!r}")
        else:
            rest.append(arg)
        i += 1
    return rest, flags


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        rest, flags = split_overrides(argv)
        args = build_parser().parse_args(rest)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        config = parse_config(args.config, flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK

    try:
        if args.command in STAGE_COMMANDS:
            manifest = run_pipeline(config, STAGE_COMMANDS[args.command], resume=args.resume)
            for rec in manifest.failed:
                print(f"stage {rec.stage} failed for seed {rec.seed}: {rec.cause}", file=sys.stderr)
            if manifest.reports:
                print(Path(manifest.reports["table"]).read_text())
            print(f"run directory: {manifest.run_dir}")
            return EXIT_OK if manifest.ok else EXIT_STAGE
        if args.command == "ablate":
            report = run_ablation(config, args.axis, resume=not args.fresh)
            print(f"axis {args.axis}\n{report.table}\nreport: {report.outputs['csv']}")
            return EXIT_STAGE if report.failed else EXIT_OK
        path = run_dir(config) / ("report.csv" if args.csv else "report.txt")
        if not path.exists():
            print(f"no report at {path}; run the pipeline first", file=sys.stderr)
            return EXIT_STAGE
        print(path.read_text(), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PromptDistillError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
