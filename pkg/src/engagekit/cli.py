"""Command-line entry point: ``engagekit --config run.ini --command all``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import STEPS, run

COMMANDS = (*STEPS, "report", "all")
log = logging.getLogger("engagekit")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="engagekit", description="Engagement modelling pipeline.")
    p.add_argument("--config", metavar="PATH", help="INI configuration file")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides run.out)")
    p.add_argument("--seed", metavar="N", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--command", metavar="NAME", choices=COMMANDS, default="all",
                   help="one of: " + ", ".join(COMMANDS))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = {"run": {}}
    if args.out is not None:
        overrides["run"]["out"] = args.out
    if args.seed is not None:
        overrides["run"]["seed"] = str(args.seed)
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"engagekit: config: {exc}", file=sys.stderr)
        return 2
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        log.info("running %s into %s", args.command, cfg.out)
        run(args.command, cfg)
    except Exception as exc:  # report with step context, never a bare traceback
        print(f"engagekit: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
