"""``team <subcommand> --config <file> [--out <dir>] [--seed <u64>]``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from team.cli.config import parse_experiment
from team.cli.stages import STAGES
from team.errors import ConfigError, ConfigFileError, TeamError

IO_EXIT_CODE = 7

log = logging.getLogger("team")


def _u64(text):
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="team", description="Critical-path decoupling and federated training.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "decouple": "pretrain in the cloud and split the model into shared layers plus critical paths",
        "train-local": "fine-tune each device's specialized model once on its local data",
        "federate": "run federated rounds over critical paths (and the full-model baseline)",
        "incremental": "add paths for new classes and federate with boosted learning rates",
        "report": "rebuild metrics.csv and summary.json from a saved timeline",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=_u64, default=None, help="master seed (overrides the file)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def thread_cap() -> int:
    raw = os.environ.get("TEAM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"TEAM_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"TEAM_THREADS must be >= 1, got {value}")
    return value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = parse_experiment(args.config).with_overrides(args.seed, args.out)
        out = Path(args.out) if args.out is not None else cfg.resolve(cfg["out_dir"])
        written = STAGES[args.command](cfg, out, thread_cap())
    except ConfigFileError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return exc.exit_code
    except TeamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for note in getattr(exc, "__notes__", []):
            print(f"  {note}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_EXIT_CODE
    for path in written:
        log.info("wrote %s", path.name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
