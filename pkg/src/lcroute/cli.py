"""Command-line entry point: collect, train-il, train-rl, eval, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, TrainingDiverged, UsageError
from .harness import commands
from .harness.config import load


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="run seed; overrides the config")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lcroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", parents=[common], help="record expert demonstrations")
    p.add_argument("--density", default="all", help="low|medium|high|crowd, a comma list, or 'all'")
    p.add_argument("--episodes", type=int, help="episodes per density (config default otherwise)")

    p = sub.add_parser("train-il", parents=[common], help="train cloud then local policies by imitation")
    p.add_argument("--dataset", required=True)

    p = sub.add_parser("train-rl", parents=[common], help="train the routing policy")
    p.add_argument("--models", required=True, help="directory holding trunk/local/cloud checkpoints")
    p.add_argument("--no-history", action="store_true", help="router sees the embedding only")
    p.add_argument("--additive", action="store_true", help="train with the additive reward baseline")

    p = sub.add_parser("eval", parents=[common], help="evaluate one method at one density")
    p.add_argument("--method", required=True,
                   help="unilcd | unilcd-no-history | local-only | cloud-only | random:<p> | additive")
    p.add_argument("--density", default="high", choices=["low", "medium", "high", "crowd"])
    p.add_argument("--profile", choices=["paper-supp", "table-consistent"])
    p.add_argument("--payload", choices=["raw", "embedding"])
    p.add_argument("--models", required=True)
    p.add_argument("--router", help="directory holding router.json (learned methods)")
    p.add_argument("--no-traces", action="store_true")

    p = sub.add_parser("report", parents=[common], help="merge report rows from run directories")
    p.add_argument("inputs", nargs="+")
    return parser


def run(args) -> object:
    if args.command == "report":
        return len(commands.cmd_report(args.inputs, args.out))
    cfg = load(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg.seed = args.seed
        cfg.sync_seeds()
    if args.command == "collect":
        episodes = cfg.collect.episodes if args.episodes is None else args.episodes
        return str(commands.cmd_collect(cfg, commands.parse_densities(args.density), episodes, args.out))
    if args.command == "train-il":
        commands.cmd_train_il(cfg, args.dataset, args.out)
        return args.out
    if args.command == "train-rl":
        if args.no_history and args.additive:
            raise UsageError("--no-history and --additive are separate variants")
        variant = "unilcd-no-history" if args.no_history else "additive" if args.additive else "unilcd"
        commands.cmd_train_rl(cfg, args.models, args.out, variant)
        return args.out
    row = commands.cmd_eval(cfg, args.method, args.density, args.out, args.models, args.router,
                            args.profile, args.payload, write_traces=not args.no_traces)
    row.pop("_results")
    return row


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ConfigError, UsageError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(json.dumps({"error": "TrainingDiverged", "message": str(exc), "diagnostics": exc.diagnostics},
                         default=str), file=sys.stderr)
        return 3
    print(json.dumps({"ok": True, "result": result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
