"""Command line entry point: ``fedpolicy run|compare|verify-chain|audit``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .adversary import AttackKind, AttackStrategy
from .chain import verify_chain_bytes
from .experiments import ConfigError, ExperimentConfig, compare_runs, load_metrics, run_experiment
from .network import AuditLog


def cmd_run(args) -> int:
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        if args.deterministic:
            cfg = replace(cfg, deterministic=True)
        if args.attack:
            base = cfg.attack or AttackStrategy(AttackKind(args.attack))
            cfg = replace(cfg, attack=replace(base, kind=AttackKind(args.attack)))
        cfg.validate()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    result = run_experiment(cfg, args.out)
    for r in result.federation.reports:
        acc = "-" if r.accuracy is None else f"{100 * r.accuracy:.2f}%"
        status = "committed" if r.committed else f"FAILED ({r.failure})"
        print(f"round {r.round}: {status} accuracy={acc} digest={(r.digest or '-')[:16]}")
    if result.scenario is not None:
        print(f"scenario: {result.scenario.to_json()}")
    print(f"final digest {result.final_digest}")
    print(f"outputs in {args.out}")
    return 1 if result.failures else 0


def cmd_compare(args) -> int:
    a = load_metrics(Path(args.dir_a) / "metrics.csv")
    b = load_metrics(Path(args.dir_b) / "metrics.csv")
    try:
        rows = compare_runs(a, b)
    except ValueError as exc:
        print(f"cannot compare: {exc}", file=sys.stderr)
        return 2
    print(f"{'round':>5} {'phase':<10} {'a_ms':>10} {'b_ms':>10} {'delta':>10} {'ratio':>7}")
    for r in rows:
        ratio = "-" if r.ratio is None else f"{r.ratio:.2f}"
        flag = "  +overhead" if r.overhead else ""
        print(f"{r.round:>5} {r.phase:<10} {r.a_ms:>10.3f} {r.b_ms:>10.3f} {r.delta_ms:>10.3f} {ratio:>7}{flag}")
    return 0


def cmd_verify_chain(args) -> int:
    data = Path(args.chainfile).read_bytes()
    verdict = verify_chain_bytes(data)
    if verdict.ok:
        print("chain OK")
        return 0
    where = "" if verdict.bad_index is None else f" at block {verdict.bad_index}"
    print(f"chain INVALID{where}: {verdict.reason}")
    return 1


def cmd_audit(args) -> int:
    events = AuditLog.read(args.logfile)
    if args.round is not None:
        events = [e for e in events if e["round"] == args.round]
    for e in events:
        print(json.dumps(e, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedpolicy", description="Policy-governed federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write metrics, chain and audit log")
    p.add_argument("--config", help="key = value config file (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--deterministic", action="store_true", help="sequential, seed-pinned execution")
    p.add_argument("--attack", choices=[k.value for k in AttackKind])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="per-phase timing deltas between two run directories")
    p.add_argument("dir_a")
    p.add_argument("dir_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify-chain", help="check every link and payload hash of a chain file")
    p.add_argument("chainfile")
    p.set_defaults(func=cmd_verify_chain)

    p = sub.add_parser("audit", help="print audit events")
    p.add_argument("logfile")
    p.add_argument("--round", type=int)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
