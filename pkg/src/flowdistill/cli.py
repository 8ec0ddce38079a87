"""Command-line runner: ``flowdistill <command> --config cfg.json [--seed N] [--out DIR] [--force]``.

``flowdistill all [--resume]`` runs every stage in order; ``--resume`` skips
leading stages whose recorded run used the same config and still verifies.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .distill import DatasetHashMismatch
from .pipeline import COMMANDS, PIPELINE, MissingArtifactError, OutputExistsError, run_all

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3

log = logging.getLogger("flowdistill")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (JSON); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="override the config output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs of this command")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="flowdistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    every = sub.add_parser("all", parents=[common], help="run every stage in order")
    every.add_argument("--resume", action="store_true", help="skip leading stages already up to date for this config")
    return p


def resolve_config(args) -> ExperimentConfig:
    overrides = {"seed": args.seed, "out_dir": args.out}
    if args.config:
        return load_config(args.config, **overrides)
    return parse_config({}, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    progress = (lambda ep, loss: log.info("epoch %d loss %.6g", ep, loss)) if args.verbose else None
    stages = PIPELINE if args.command == "all" else (args.command,)

    def show(name, result):
        print(json.dumps({"command": name, "result": result}, sort_keys=True, default=float))

    try:
        run_all(cfg, force=args.force, stages=stages, resume=getattr(args, "resume", False), progress=progress, on_result=show)
    except (MissingArtifactError, DatasetHashMismatch) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
