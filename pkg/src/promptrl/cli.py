"""Command-line entry points.

Subcommands: train, ablate, report, oracle, mock-eval. Exit codes: 0 success,
1 failure, 2 partial result. All randomness flows from the seed arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ExperimentConfig, ablate, report, run
from .protocol import MockEvaluatorServer, serve_stdio, with_noise_sigma
from .reward import WeightPair
from .synthenv import (OBJECTIVE_COMPOSITE, OBJECTIVES, EnvConfig, brute_force_best,
                       dump_enumeration_csv)
from .tokens import Scenario


def _load_env_config(path: str) -> EnvConfig:
    with open(path, encoding="utf-8") as fh:
        return EnvConfig.from_json_dict(json.load(fh))


def _cmd_train(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    record = run(config, args.seed, args.out)
    if record.metrics is not None:
        m = record.metrics
        print(f"seed {args.seed}: sa_pct={m.sa_pct:.1f} pc_pct={m.pc_pct:.1f} "
              f"joint_pct={m.joint_pct:.1f} avg_sa={m.avg_sa:.3f} avg_pc={m.avg_pc:.3f}")
    if record.status != "completed":
        print(f"run failed: {record.failure}", file=sys.stderr)
        return 1
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    seeds = list(range(args.seed_base, args.seed_base + args.seeds))
    rep = ablate(config, seeds, args.out)
    print(rep.markdown_table(), end="")
    return 0 if rep.complete else 2


def _cmd_report(args: argparse.Namespace) -> int:
    written, warnings = report(args.runs, args.out)
    for path in written:
        print(f"wrote {path}")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 2 if warnings else 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    env_config = _load_env_config(args.env_config)
    intents = frozenset(env_config.vocab.intent_ids[: env_config.k])
    scenario = Scenario(class_id=args.class_id, intent_tokens=intents,
                        prompt=tuple(sorted(intents)))
    weights = None
    if args.objective == OBJECTIVE_COMPOSITE:
        weights = WeightPair(w_sa=args.w_sa, w_pc=1.0 - args.w_sa)
    best, sc = brute_force_best(env_config, scenario, args.objective, weights)
    print(json.dumps({"objective": args.objective, "class_id": args.class_id,
                      "best_multiset": list(best), "sa": sc.sa, "pc": sc.pc}))
    if args.dump:
        Path(args.dump).write_text(dump_enumeration_csv(env_config, scenario),
                                   encoding="utf-8")
        print(f"wrote {args.dump}", file=sys.stderr)
    return 0


def _cmd_mock_eval(args: argparse.Namespace) -> int:
    env_config = with_noise_sigma(_load_env_config(args.env_config), args.noise_sigma)
    if args.transport == "stdio":
        serve_stdio(env_config)
        return 0
    server = MockEvaluatorServer(env_config, port=args.port)
    print(f"listening on {server.host}:{server.port}", file=sys.stderr, flush=True)
    server.serve_forever()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptrl")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the two-stage pipeline once")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="four-way reward-mode ablation with matched seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="aggregate run records into curves and tables")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("oracle", help="exhaustive search over rewrites")
    p.add_argument("--env-config", required=True)
    p.add_argument("--objective", choices=OBJECTIVES, required=True)
    p.add_argument("--class-id", type=int, default=0)
    p.add_argument("--w-sa", type=float, default=0.5,
                   help="sa weight for the composite objective")
    p.add_argument("--dump", help="write the full enumeration as CSV")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("mock-eval", help="serve the scoring protocol over stdio or TCP")
    p.add_argument("--transport", choices=("stdio", "tcp"), default="stdio")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--env-config", required=True)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.set_defaults(func=_cmd_mock_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
