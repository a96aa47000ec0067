"""Command-line interface: ``safeobs <command> --config PATH --out DIR``."""

import argparse
import json
import logging
import sys

from .errors import ConfigError
from .pipeline import EXIT_CONFIG, load_config, parse_config, run_command, vdp_config

COMMANDS = ("design-initial", "learn", "redesign", "simulate", "reproduce-vdp")


def build_parser():
    parser = argparse.ArgumentParser(prog="safeobs", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="JSON configuration (optional for reproduce-vdp)")
    parser.add_argument("--out", metavar="DIR", required=True, help="run directory for artifacts")
    parser.add_argument("--seed", type=int, metavar="U64", help="override the configured seed")
    parser.add_argument("--threads", type=int, metavar="N", help="threads for candidate evaluation")
    parser.add_argument("--which", choices=("initial", "learned", "redesigned", "all"), default="all",
                        help="trajectory for the simulate command")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _resolve_config(args):
    if args.config is None:
        if args.command != "reproduce-vdp":
            raise ConfigError([{"loc": ("--config",), "msg": f"required for {args.command}"}])
        data = vdp_config()
    else:
        data = load_config(args.config).model_dump(mode="json")
    if args.seed is not None:
        data["seed"] = args.seed
    if args.threads is not None:
        data["threads"] = args.threads
    return parse_config(data)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "details": [
            {"loc": list(map(str, e.get("loc", ()))), "msg": e.get("msg")} for e in exc.errors]}))
        return EXIT_CONFIG
    return run_command(args.command, cfg, args.out, args.which)


if __name__ == "__main__":
    sys.exit(main())
