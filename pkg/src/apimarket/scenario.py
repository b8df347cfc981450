"""Scenario files: everything needed to reproduce one marketplace run."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import families
from .model_ir import ModelGraph, graph_from_json
from .partitioner import STRATEGIES


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Injection:
    behavior: str
    # 1-based vendor / component selector; None lets the runner pick from the seed
    target: int | None = None
    params: dict[str, Any] = field(default_factory=dict, hash=False, compare=False)


@dataclass(frozen=True)
class ClaimSpec:
    kind: str
    invocation: int = 0
    claimant: str = "consumer"


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    protocol: str = "a"
    strategy: str = "pipeline"
    model: dict[str, Any] = field(default_factory=lambda: {"family": "chain", "stages": 4, "width": 3}, hash=False)
    vendors: int = 3
    components: int = 3
    replication: int = 2
    consumers: int = 1
    invocations: tuple[tuple[float, ...], ...] | int = 3
    adversaries: tuple[Injection, ...] = ()
    claims: tuple[ClaimSpec, ...] = ()
    step_budget: int = 100
    base_dir: str = field(default=".", compare=False)

    def with_seed(self, seed: int) -> Scenario:
        return replace(self, seed=seed)


_FIELDS = {
    "name", "seed", "protocol", "strategy", "model", "vendors", "components",
    "replication", "consumers", "invocations", "adversaries", "claims", "step_budget",
}


def scenario_from_json(doc: dict, base_dir: str = ".") -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    unknown = set(doc) - _FIELDS
    if unknown:
        raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
    try:
        protocol = str(doc.get("protocol", "a")).lower()
        if protocol not in ("a", "b"):
            raise ScenarioError(f"protocol must be 'a' or 'b', not {protocol!r}")
        strategy = doc.get("strategy", "pipeline")
        if strategy not in STRATEGIES:
            raise ScenarioError(f"unknown strategy {strategy!r}")
        inv = doc.get("invocations", 3)
        invocations = int(inv) if isinstance(inv, int) else tuple(tuple(float(v) for v in row) for row in inv)
        adversaries = tuple(
            Injection(a["behavior"], a.get("target"), dict(a.get("params", {})))
            for a in doc.get("adversaries", ())
        )
        claims = tuple(
            ClaimSpec(c["kind"], int(c.get("invocation", 0)), c.get("claimant", "consumer"))
            for c in doc.get("claims", ())
        )
        return Scenario(
            name=str(doc.get("name", "scenario")),
            seed=int(doc.get("seed", 0)),
            protocol=protocol,
            strategy=strategy,
            model=dict(doc.get("model", {"family": "chain", "stages": 4, "width": 3})),
            vendors=int(doc.get("vendors", 3)),
            components=int(doc.get("components", 3)),
            replication=int(doc.get("replication", 2)),
            consumers=int(doc.get("consumers", 1)),
            invocations=invocations,
            adversaries=adversaries,
            claims=claims,
            step_budget=int(doc.get("step_budget", 100)),
            base_dir=base_dir,
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"bad scenario: {exc}") from exc


def scenario_to_json(s: Scenario) -> dict:
    return {
        "name": s.name,
        "seed": s.seed,
        "protocol": s.protocol,
        "strategy": s.strategy,
        "model": s.model,
        "vendors": s.vendors,
        "components": s.components,
        "replication": s.replication,
        "consumers": s.consumers,
        "invocations": s.invocations if isinstance(s.invocations, int) else [list(r) for r in s.invocations],
        "adversaries": [{"behavior": a.behavior, "target": a.target, "params": a.params} for a in s.adversaries],
        "claims": [{"kind": c.kind, "invocation": c.invocation, "claimant": c.claimant} for c in s.claims],
        "step_budget": s.step_budget,
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
    return scenario_from_json(doc, str(path.parent))


def build_model(spec: dict[str, Any], rng: random.Random, base_dir: str = ".") -> ModelGraph:
    """Instantiate the scenario's model from a file or a seeded family."""
    if "file" in spec:
        path = Path(base_dir) / spec["file"]
        try:
            return graph_from_json(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read model file {path}: {exc}") from exc
    if "nodes" in spec:
        return graph_from_json(spec)
    family = spec.get("family", "chain")
    model_id = spec.get("model_id", family)
    try:
        if family == "chain":
            return families.random_chain(int(spec.get("stages", 4)), int(spec.get("width", 3)), rng, model_id)
        if family == "credit":
            return families.credit_formula(int(spec.get("metrics", 3)), int(spec.get("features", 4)), rng, model_id)
        if family == "mlp":
            return families.mlp([int(w) for w in spec.get("widths", [4, 6, 5, 2])], rng, model_id)
        if family == "tree":
            return families.decision_tree(
                int(spec.get("depth", 3)),
                int(spec.get("features", 3)),
                rng,
                model_id,
                leaf_width=int(spec.get("leaf_width", 1)),
                p_leaf=float(spec.get("p_leaf", 0.0)),
            )
        if family == "ensemble":
            return families.ensemble(
                int(spec.get("learners", 4)),
                int(spec.get("features", 3)),
                rng,
                model_id,
                combiner=spec.get("combiner", "average"),
                weak=spec.get("weak", "mixed"),
                out_width=int(spec.get("out_width", 1)),
            )
        if family == "identity":
            return families.identity(int(spec.get("width", 1)), model_id)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    raise ScenarioError(f"unknown model family {family!r}")
