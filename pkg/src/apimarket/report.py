"""Run reports: a JSON document plus a couple of PNG charts next to it."""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Any

from .audit import Claim, Escrow, Verdict
from .ledger import VirtualId
from .runner import RunResult
from .scenario import scenario_to_json

REPORT_VERSION = 1


def _value(v) -> list[str] | None:
    return None if v is None else [repr(float(x)) for x in v]


def reveals_to_json(reveals: dict) -> dict:
    out = {}
    for party, data in reveals.items():
        out[bytes(party).hex()] = {
            "holders": {str(i): bytes(v).hex() for i, v in sorted(data.get("holders", {}).items())},
            "steps": {str(i): [_value(d), _value(o)] for i, (d, o) in sorted(data.get("steps", {}).items())},
        }
    return out


def reveals_from_json(doc: dict) -> dict[VirtualId, dict[str, Any]]:
    out = {}
    for party, data in doc.items():
        out[VirtualId(bytes.fromhex(party))] = {
            "holders": {int(i): VirtualId(bytes.fromhex(v)) for i, v in data.get("holders", {}).items()},
            "steps": {
                int(i): (tuple(float(x) for x in d), tuple(float(x) for x in o))
                for i, (d, o) in data.get("steps", {}).items()
            },
        }
    return out


def build_report(result: RunResult) -> dict[str, Any]:
    market, ledger = result.market, result.market.ledger
    dep_seq, dep = ledger.deployment(result.model.model_id)
    steps = Counter()
    for env in ledger.envelopes:
        if env.payload.KIND in ("ExecutionStep", "ExecutionStepHashed"):
            steps[env.payload.vendor.hex()] += 1
    return {
        "version": REPORT_VERSION,
        "scenario": scenario_to_json(result.scenario),
        "protocol": dep.protocol,
        "model_id": dep.model_id,
        "signature": dep.signature.hex(),
        "components": dep.num_components,
        "deployment_seq": dep_seq,
        "parties": [{"vid": vid.hex(), "role": role} for vid, role in result.roles.items()],
        "invocations": [
            {
                "invocation_id": r.invocation_id,
                "consumer": r.consumer.hex(),
                "input": _value(r.input),
                "output": _value(r.output),
                "error": r.error,
            }
            for r in result.invocations
        ],
        "usage": {m.model_id: ledger.usage_count(m.model_id) for _, m in ledger.deployments()},
        "steps_per_vendor": dict(sorted(steps.items())),
        "verdicts": [v.to_json() for v in result.verdicts],
        "injections": [
            {"behavior": b, "expected_culpable": vid.hex()} for b, vid in sorted(result.expected.items())
        ],
        "collusion": result.collusion,
        "errors": result.errors,
        "ledger": {
            "records": len(ledger),
            "head": ledger.head[1].hex(),
            "intact": ledger.verify_chain() is None,
        },
        "arbitration": {
            "escrow": market.escrow.to_json(),
            "claims": [{"claim": fc.claim.to_json(), "reveals": reveals_to_json(fc.reveals)} for fc in result.claims],
        },
    }


def load_arbitration(doc: dict) -> tuple[Escrow, list[tuple[Claim, dict]]]:
    """Claims with their reveals plus the escrow, from a report or a bare claims file."""
    section = doc.get("arbitration", doc)
    escrow = Escrow.from_json(section.get("escrow", {}))
    claims = []
    for item in section["claims"]:
        if "claim" in item:
            claims.append((Claim.from_json(item["claim"]), reveals_from_json(item.get("reveals", {}))))
        else:
            claims.append((Claim.from_json(item), {}))
    return escrow, claims


def verdicts_json(verdicts: list[Verdict]) -> str:
    return json.dumps([v.to_json() for v in verdicts], indent=2, sort_keys=True)


def write_report(result: RunResult, path: str | Path, figures: bool = True) -> list[Path]:
    """Write the JSON report; with ``figures`` also PNG charts beside it. Returns every file written."""
    path = Path(path)
    report = build_report(result)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written = [path]
    if figures:
        written += render_figures(result, report, path)
    return written


def _figure_path(report_path: Path, tag: str) -> Path:
    stem = report_path.name[: -len(report_path.suffix)] if report_path.suffix else report_path.name
    return report_path.with_name(f"{stem}.{tag}.png")


def render_figures(result: RunResult, report: dict, report_path: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.ticker import MaxNLocator

    roles = {vid.hex(): role for vid, role in result.roles.items()}
    out = []

    fig, ax = plt.subplots(figsize=(6, 3.2))
    vendors = [v for v, r in roles.items() if r == "vendor"]
    counts = [report["steps_per_vendor"].get(v, 0) for v in vendors]
    culprits = {v["culpable"] for v in report["verdicts"] if v["culpable"]}
    colors = ["tab:red" if v in culprits else "tab:blue" for v in vendors]
    ax.bar([v[:8] for v in vendors], counts, color=colors)
    ax.set_xlabel("vendor (virtual id prefix)")
    ax.set_ylabel("steps recorded")
    ax.yaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_title(f"{report['model_id']}: protocol {report['protocol']}, {report['components']} components")
    fig.tight_layout()
    p = _figure_path(report_path, "steps")
    fig.savefig(p, dpi=100)
    plt.close(fig)
    out.append(p)

    fig, ax = plt.subplots(figsize=(6, 3.2))
    kinds = Counter(env.payload.KIND for env in result.market.ledger.envelopes)
    names = sorted(kinds)
    ax.barh(names, [kinds[k] for k in names], color="tab:gray")
    ax.set_xlabel("records")
    outcomes = Counter(v["outcome"] for v in report["verdicts"])
    ax.set_title(", ".join(f"{k}: {outcomes[k]}" for k in sorted(outcomes)) or "no verdicts")
    fig.tight_layout()
    p = _figure_path(report_path, "records")
    fig.savefig(p, dpi=100)
    plt.close(fig)
    out.append(p)
    return out
