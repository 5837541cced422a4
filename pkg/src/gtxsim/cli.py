"""Command-line runner: simulate a cluster, check the history, print metrics.

Exit codes: 0 the checks passed, 2 bad configuration, 3 a check found a
violation, 4 the serializability search hit its bound.
"""
from __future__ import annotations

import argparse
import json
import sys

from .checker import SearchExhausted, check_for_mode
from .counterexample import run_counterexample
from .history import dump_jsonl
from .runner import POLICIES, WORKLOADS, ConfigError, RunConfig, run
from .simworld import load_scenario
from .txn import MODES, MUTATIONS

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_EXHAUSTED = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtxsim", description=__doc__.splitlines()[0])
    p.add_argument("--nodes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-ms", type=float, default=200.0, help="simulated time limit")
    p.add_argument("--mode", default="strict-ser", help="|".join(MODES))
    p.add_argument("--versioning", default="multi", choices=("single", "multi"))
    p.add_argument("--oldver-policy", default="truncate", choices=POLICIES)
    p.add_argument("--workload", default="ycsb-lite", help="|".join(WORKLOADS) + "|script:<path>")
    p.add_argument("--theta", type=float, default=0.0, help="zipf skew; 0 is uniform")
    p.add_argument("--scan-len", type=int, default=4)
    p.add_argument("--lease-ms", type=float, default=10.0)
    p.add_argument("--epsilon-ppm", type=int, default=1000)
    p.add_argument("--sync-period-us", type=int, default=1000)
    p.add_argument("--mutate", action="append", default=[], metavar="FLAG", help="|".join(MUTATIONS))
    p.add_argument("--scenario", metavar="FILE", help="JSON list of fault actions")
    p.add_argument("--history-out", metavar="FILE", help="write the history as JSON lines")
    p.add_argument("--keys", type=int, default=64)
    p.add_argument("--txns", type=int, default=300, help="operations to run; 0 runs for --duration-ms")
    p.add_argument("--clients-per-node", type=int, default=1)
    p.add_argument("--oldver-budget", type=int, default=16 * 1024, help="old-version bytes per node")
    p.add_argument("--random-faults", action="store_true", help="inject one seeded crash or isolation")
    return p


def config_from_args(args) -> RunConfig:
    scenario = None
    if args.scenario:
        try:
            scenario = load_scenario(args.scenario)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigError(f"bad scenario file: {e}") from None
    return RunConfig(nodes=args.nodes, seed=args.seed, duration_ms=args.duration_ms, mode=args.mode,
                     versioning=args.versioning, oldver_policy=args.oldver_policy, workload=args.workload,
                     theta=args.theta, scan_len=args.scan_len, lease_ms=args.lease_ms,
                     epsilon_ppm=args.epsilon_ppm, sync_period_us=args.sync_period_us,
                     mutations=tuple(args.mutate), scenario=scenario, keys=args.keys,
                     txns=args.txns or None, clients_per_node=args.clients_per_node,
                     oldver_budget=args.oldver_budget, random_faults=args.random_faults)


def _verdicts_json(verdicts) -> list:
    return [{"check": v.reason.split(":")[0], "ok": v.ok, "detail": v.reason} for v in verdicts]


def _finish(report: dict, history, args, verdicts) -> int:
    if args.history_out:
        dump_jsonl(history, args.history_out)
    report["checks"] = _verdicts_json(verdicts)
    report["result"] = "pass" if all(v.ok for v in verdicts) else "violation"
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if all(v.ok for v in verdicts) else EXIT_VIOLATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        cfg.validate()
        if cfg.workload == "counterexample":
            res = run_counterexample(mutations=cfg.mutations)
            return _finish({"counterexample": res.summary()}, res.history, args, [res.verdict])
        cluster = run(cfg)
    except ConfigError as e:
        print(f"gtxsim: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = cluster.report()
    try:
        verdicts = check_for_mode(cluster.history, cfg.mode)
    except SearchExhausted as e:
        if args.history_out:
            dump_jsonl(cluster.history, args.history_out)
        report["result"] = "search_exhausted"
        report["checks"] = [{"check": "search", "ok": False, "detail": str(e)}]
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_EXHAUSTED
    return _finish(report, cluster.history, args, verdicts)


if __name__ == "__main__":
    sys.exit(main())
