"""Command line: run scenarios, inspect and verify ledgers, arbitrate claims."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .audit import AuditError, LedgerCorrupted, resolve
from .encoding import DecodeError
from .ledger import Ledger, RECORD_TYPES
from .model_ir import ModelError
from .partitioner import InsufficientVendors, NotPartitionable, PlacementInfeasible
from .report import load_arbitration, verdicts_json, write_report
from .runner import run_scenario
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_PARSE = 1
EXIT_PROTOCOL = 2
EXIT_CORRUPT = 3


def _err(msg: str) -> None:
    print(f"apimarket: {msg}", file=sys.stderr)


def _load_ledger(path: str) -> Ledger:
    return Ledger.load(path)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        _err(str(exc))
        return EXIT_PARSE
    stem = Path(args.scenario).stem
    ledger_out = Path(args.ledger_out or f"{stem}.ledger.jsonl")
    report_out = Path(args.report_out or f"{stem}.report.json")
    try:
        result = run_scenario(scenario, protocol=args.protocol, seed=args.seed)
    except (ScenarioError, ValueError) as exc:
        if isinstance(exc, (InsufficientVendors, PlacementInfeasible, NotPartitionable)):
            _err(f"deployment failed: {exc}")
            return EXIT_PROTOCOL
        _err(str(exc))
        return EXIT_PARSE
    except (ModelError, AuditError) as exc:
        _err(f"run failed: {exc}")
        return EXIT_PROTOCOL
    result.market.ledger.save(ledger_out)
    write_report(result, report_out, figures=not args.no_figures)

    for r in result.invocations:
        status = "ok" if r.error is None else r.error
        print(f"{r.invocation_id}: {status}")
    for v in result.verdicts:
        who = "" if v.culpable is None else f" {result.roles.get(v.culpable, '?')} {v.culpable.short}"
        print(f"verdict {v.claim.dispute_id} {v.claim.kind}: {v.outcome}{who} ({v.reason})")
    print(f"ledger: {ledger_out} ({len(result.market.ledger)} records)")
    print(f"report: {report_out}")
    if result.protocol_failed and not result.culpable:
        _err("protocol failure with nobody held responsible")
        return EXIT_PROTOCOL
    return EXIT_OK


def _describe(env) -> str:
    p = env.payload
    parts = []
    for key in ("model_id", "invocation_id", "step_index", "dispute_id", "claim_kind", "outcome", "reason"):
        v = getattr(p, key, None)
        if v not in (None, ""):
            parts.append(f"{key}={v}")
    return " ".join(parts)


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        ledger = _load_ledger(args.ledger)
    except (OSError, ValueError, KeyError, DecodeError) as exc:
        _err(f"cannot read ledger: {exc}")
        return EXIT_PARSE
    if args.kind and args.kind not in RECORD_TYPES:
        _err(f"unknown record kind {args.kind!r}; choose from {', '.join(RECORD_TYPES)}")
        return EXIT_PARSE
    envs = ledger.envelopes
    if args.model:
        keep = {e.seq for e in ledger.query_by_model(args.model)}
        envs = [e for e in envs if e.seq in keep]
    if args.invocation:
        keep = {e.seq for e in ledger.query_by_invocation(args.invocation)}
        envs = [e for e in envs if e.seq in keep]
    if args.kind:
        envs = [e for e in envs if e.payload.KIND == args.kind]
    for env in envs:
        if args.json:
            print(json.dumps(env.to_json(), sort_keys=True))
        else:
            print(f"{env.seq:5d}  {env.payload.KIND:<20} {env.author.short}  {_describe(env)}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        ledger = _load_ledger(args.ledger)
    except (OSError, ValueError, KeyError, DecodeError) as exc:
        _err(f"cannot read ledger: {exc}")
        return EXIT_PARSE
    bad = ledger.verify_chain()
    if bad is not None:
        print(f"chain broken at seq {bad}")
        return EXIT_CORRUPT
    print(f"chain intact: {len(ledger)} records, head {ledger.head[1].hex()}")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    try:
        ledger = _load_ledger(args.ledger)
        doc = json.loads(Path(args.claims).read_text(encoding="utf-8"))
        escrow, claims = load_arbitration(doc)
        if args.escrow:
            escrow, _ = load_arbitration({"escrow": json.loads(Path(args.escrow).read_text(encoding="utf-8")), "claims": []})
    except (OSError, ValueError, KeyError, TypeError, DecodeError) as exc:
        _err(f"cannot read input: {exc}")
        return EXIT_PARSE
    try:
        verdicts = [resolve(c, ledger, escrow, reveals) for c, reveals in claims]
    except LedgerCorrupted as exc:
        print(f"chain broken at seq {exc.seq}")
        return EXIT_CORRUPT
    except AuditError as exc:
        _err(str(exc))
        return EXIT_PARSE
    text = verdicts_json(verdicts)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apimarket", description="Simulated split-model API marketplace on a ledger.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write the ledger and a report")
    run.add_argument("--scenario", required=True, metavar="PATH")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--ledger-out", metavar="PATH")
    run.add_argument("--report-out", metavar="PATH")
    run.add_argument("--protocol", type=str.lower, choices=("a", "b"), help="override the scenario protocol")
    run.add_argument("--no-figures", action="store_true", help="skip the PNG charts")
    run.set_defaults(func=cmd_run)

    insp = sub.add_parser("inspect", help="list ledger records")
    insp.add_argument("ledger", metavar="LEDGER")
    insp.add_argument("--model")
    insp.add_argument("--invocation")
    insp.add_argument("--kind")
    insp.add_argument("--json", action="store_true", help="print raw envelopes")
    insp.set_defaults(func=cmd_inspect)

    ver = sub.add_parser("verify", help="check the hash chain")
    ver.add_argument("ledger", metavar="LEDGER")
    ver.set_defaults(func=cmd_verify)

    aud = sub.add_parser("audit", help="resolve claims against a ledger")
    aud.add_argument("--ledger", required=True, metavar="PATH")
    aud.add_argument("--claims", required=True, metavar="PATH", help="run report or claims file")
    aud.add_argument("--escrow", metavar="PATH", help="escrow JSON overriding the one in the claims file")
    aud.add_argument("--out", metavar="PATH")
    aud.set_defaults(func=cmd_audit)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
