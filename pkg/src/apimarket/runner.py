"""Run a scenario end to end: deploy, invoke, misbehave, dispute, arbitrate."""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Any

from .audit import (
    CATALOG,
    Claim,
    ClaimKind,
    MissingFragments,
    Verdict,
    pool_fragments,
    resolve,
)
from .encoding import as_value, sha256
from .ledger import DisputeOpened, DisputeVerdict, ModelDeployment, ValidationRejected, VirtualId
from .market import Marketplace
from .model_ir import ModelGraph, hash_component
from .partitioner import PartitionPlan, merkle_root
from .protocol import ProtocolError
from .scenario import Injection, Scenario, build_model

ARBITRATOR_ENDPOINT = "arbitrator://market"

_VENDOR_MODES = {
    "vendor_tampers_component": "tamper",
    "vendor_skips_step": "skip",
    "vendor_substitutes_output": "substitute",
    "vendor_underreports_usage": "underreport",
}


@dataclass
class InvocationResult:
    invocation_id: str | None
    consumer: VirtualId
    input: tuple[float, ...]
    output: tuple[float, ...] | None = None
    error: str | None = None


@dataclass
class FiledClaim:
    claim: Claim
    reveals: dict[VirtualId, dict[str, Any]] = field(default_factory=dict)
    verdict: Verdict | None = None


@dataclass
class RunResult:
    scenario: Scenario
    market: Marketplace
    model: ModelGraph
    plan: PartitionPlan | None
    invocations: list[InvocationResult]
    claims: list[FiledClaim]
    expected: dict[str, VirtualId]
    collusion: list[dict[str, Any]]
    errors: list[str]
    roles: dict[VirtualId, str]

    @property
    def verdicts(self) -> list[Verdict]:
        return [c.verdict for c in self.claims if c.verdict is not None]

    @property
    def culpable(self) -> set[VirtualId]:
        return {v.culpable for v in self.verdicts if v.culpable is not None}

    @property
    def protocol_failed(self) -> bool:
        return any(r.error for r in self.invocations) or bool(self.errors)


def _random_input(rng: random.Random, width: int) -> tuple[float, ...]:
    return tuple(round(rng.uniform(-2.0, 2.0), 6) for _ in range(width))


def run_scenario(scenario: Scenario, protocol: str | None = None, seed: int | None = None) -> RunResult:
    s = scenario
    if seed is not None:
        s = s.with_seed(seed)
    proto = (protocol or s.protocol).upper()
    for inj in s.adversaries:
        if inj.behavior not in CATALOG:
            raise ValueError(f"unknown adversary behavior {inj.behavior!r}")
    behaviors = {inj.behavior: inj for inj in s.adversaries}

    rng = random.Random(s.seed)
    model = build_model(s.model, rng, s.base_dir)
    market = Marketplace(s.seed, s.step_budget)
    provider = market.add_provider(
        "provider", "wrong_model" if "provider_deploys_wrong_model" in behaviors else None
    )
    vendors = [market.add_vendor(f"vendor{i + 1}") for i in range(s.vendors)]
    consumers = [market.add_consumer(f"consumer{i + 1}") for i in range(max(1, s.consumers))]
    orchestrator = market.add_orchestrator("orchestrator") if proto == "B" else None
    roles = {a.vid: a.role for a in market.actors}
    errors: list[str] = []

    plan = market.deploy(
        provider, model, s.strategy, vendors, proto, s.components, s.replication, orchestrator
    )
    _, dep = market.ledger.deployment(model.model_id)

    if isinstance(s.invocations, int):
        inputs = [_random_input(rng, model.input_arity) for _ in range(s.invocations)]
    else:
        inputs = [as_value(x) for x in s.invocations]

    expected: dict[str, VirtualId] = {}
    for name, inj in behaviors.items():
        party = CATALOG[name].party
        if party == "provider":
            expected[name] = provider.vid
        elif party == "consumer":
            expected[name] = consumers[0].vid
        elif name in _VENDOR_MODES:
            target = _pick_vendor(market, dep, model.model_id, inj, rng, orchestrator)
            market.actor(target).behavior = _VENDOR_MODES[name]
            expected[name] = target

    results: list[InvocationResult] = []
    for j, x in enumerate(inputs):
        consumer = consumers[j % len(consumers)]
        inv_id = market.peek_invocation_id(model.model_id)
        try:
            out = consumer.invoke(model.model_id, x)
            results.append(InvocationResult(inv_id, consumer.vid, x, out))
        except (ProtocolError, ValidationRejected) as exc:
            results.append(InvocationResult(inv_id, consumer.vid, x, None, f"{type(exc).__name__}: {exc}"))

    collusion: list[dict[str, Any]] = []
    if "vendors_collude_reconstruct" in behaviors:
        front = _collude(market, dep, model.model_id, behaviors["vendors_collude_reconstruct"], rng, collusion)
        if front is not None:
            expected["vendors_collude_reconstruct"] = front

    claims = _file_claims(market, s, dep, provider, consumers, orchestrator, vendors, results, behaviors, rng)
    arbitrator = VirtualId.derive(ARBITRATOR_ENDPOINT, sha256(f"apimarket:{s.seed}".encode()))
    for n, fc in enumerate(claims):
        c = fc.claim
        if c.dispute_id is None:
            c = replace(c, dispute_id=f"D{n + 1}")
            fc.claim = c
            try:
                market.ledger.append(
                    DisputeOpened(c.dispute_id, c.claimant, c.kind, c.invocation_id, c.model_id), c.claimant
                )
            except ValidationRejected as exc:
                errors.append(f"dispute {c.dispute_id} not recorded: {exc}")
        fc.verdict = resolve(c, market.ledger, market.escrow, fc.reveals)
    for fc in claims:
        v, c = fc.verdict, fc.claim
        try:
            market.ledger.append(
                DisputeVerdict(c.dispute_id, v.outcome, v.culpable, v.reason, c.invocation_id, c.model_id), arbitrator
            )
        except ValidationRejected as exc:
            errors.append(f"verdict for {c.dispute_id} not recorded: {exc}")
    roles[arbitrator] = "arbitrator"
    return RunResult(s, market, model, plan, results, claims, expected, collusion, errors, roles)


def _pick_vendor(market, dep: ModelDeployment, model_id: str, inj: Injection, rng, orchestrator) -> VirtualId:
    n = dep.num_components
    if inj.behavior == "vendor_underreports_usage":
        pool = list(dict.fromkeys(dep.sequence if dep.protocol == "A" else [v for hs in dep.holders for v in hs]))
        k = inj.target if inj.target is not None else rng.randint(1, len(pool))
        return pool[(k - 1) % len(pool)]
    comp = inj.target if inj.target is not None else rng.randint(1, n)
    comp = (comp - 1) % n + 1
    if dep.protocol == "A":
        return dep.sequence[comp - 1]
    # the vendor the orchestrator will route this component to on the first call
    return orchestrator.draw(dep, market.peek_invocation_id(model_id))[comp]


def _collude(market, dep: ModelDeployment, model_id: str, inj: Injection, rng, log: list) -> VirtualId | None:
    """Vendors missing one component pool what they hold, then pass it off as their own model."""
    n = dep.num_components
    comp = inj.target if inj.target is not None else rng.randint(1, n)
    comp = (comp - 1) % n + 1
    holders_of = dep.holders[comp - 1] if dep.protocol == "B" else (dep.sequence[comp - 1],)
    vendors = [v for v in market.registry.members("vendor")]
    coalition = [v for v in vendors if v not in holders_of]
    holdings = {v: market.actor(v).holdings(model_id) for v in coalition}
    entry: dict[str, Any] = {"coalition": [v.hex() for v in coalition], "lacking": comp}
    try:
        pool_fragments(holdings, coalition, n)
        entry["reconstructed"] = True
    except MissingFragments as exc:
        entry["reconstructed"] = False
        entry["missing"] = list(exc.missing)
    log.append(entry)
    pooled: dict[int, ModelGraph] = {}
    for v in coalition:
        pooled.update(holdings[v])
    if not coalition or not pooled:
        return None
    front = coalition[0]
    leaves = tuple(hash_component(pooled[i]) for i in sorted(pooled))
    counterfeit = ModelDeployment(
        model_id=f"{model_id}-resale",
        signature=merkle_root(leaves),
        sequence=(),
        component_leaf_hashes=leaves,
        num_components=len(leaves),
        protocol="B",
        holders=tuple((front,) for _ in leaves),
        providers=(front,),
        orchestrator=front,
    )
    market.ledger.append(counterfeit, front)
    entry["front"] = front.hex()
    entry["counterfeit_model"] = counterfeit.model_id
    return front


def _perturb(v: tuple[float, ...]) -> tuple[float, ...]:
    return (v[0] + 1.0,) + tuple(v[1:])


def _file_claims(market, s: Scenario, dep, provider, consumers, orchestrator, vendors, results, behaviors, rng) -> list[FiledClaim]:
    model_id = dep.model_id
    claims: list[FiledClaim] = []

    def reveals_for(inv_id: str) -> dict:
        if orchestrator is None or inv_id not in orchestrator.transcripts:
            return {}
        return {orchestrator.vid: orchestrator.transcripts[inv_id].reveal()}

    def add(claim: Claim) -> None:
        claims.append(FiledClaim(claim, reveals_for(claim.invocation_id) if claim.invocation_id else {}))

    done = [r for r in results if r.output is not None]
    stalled = [r for r in results if r.output is None and r.invocation_id is not None]
    first = done[0] if done else None

    # complaints the vendors raised themselves while running
    for seq, rec in [(e.seq, e.payload) for e in market.ledger.envelopes if e.payload.KIND == "DisputeOpened"]:
        add(Claim(rec.claimant, rec.claim_kind, rec.invocation_id, rec.model_id, dispute_id=rec.dispute_id))

    if any(b in behaviors for b in ("vendor_tampers_component", "vendor_substitutes_output")):
        for r in done:
            add(Claim(r.consumer, ClaimKind.WRONG_OUTPUT, r.invocation_id, revealed_output=r.output))
    if stalled:
        for r in stalled:
            add(Claim(r.consumer, ClaimKind.STEP_SKIPPED, r.invocation_id))
    if "provider_repudiates_version" in behaviors and first is not None:
        bogus = sha256(b"another version" + dep.signature)
        add(Claim(provider.vid, ClaimKind.COMPONENT_TAMPERED, first.invocation_id, asserted_signature=bogus))
    if "consumer_forges_output_claim" in behaviors and first is not None:
        add(Claim(first.consumer, ClaimKind.WRONG_OUTPUT, first.invocation_id, revealed_output=_perturb(first.output)))
    if "consumer_misstates_input" in behaviors and first is not None:
        add(Claim(first.consumer, ClaimKind.WRONG_INPUT, first.invocation_id, revealed_input=_perturb(first.input)))
    if "vendors_collude_reconstruct" in behaviors:
        add(Claim(provider.vid, ClaimKind.MODEL_THEFT_ATTEMPT, model_id=model_id))

    for spec in s.claims:
        if not results:
            break
        r = results[spec.invocation % len(results)]
        claimant = provider.vid if spec.claimant == "provider" else r.consumer
        add(Claim(claimant, spec.kind, r.invocation_id if spec.kind != ClaimKind.UNDER_REPORTED_USAGE else None,
                  model_id if spec.kind in (ClaimKind.UNDER_REPORTED_USAGE, ClaimKind.MODEL_THEFT_ATTEMPT) else None,
                  revealed_output=r.output if spec.kind == ClaimKind.WRONG_OUTPUT else None,
                  revealed_input=r.input if spec.kind == ClaimKind.WRONG_INPUT else None))

    if not behaviors and first is not None and not s.claims:
        # a spurious complaint about an honest run
        add(Claim(first.consumer, ClaimKind.WRONG_OUTPUT, first.invocation_id, revealed_output=first.output))

    # the provider always reconciles billing against what vendors report
    involved = dep.sequence if dep.protocol == "A" else [v for hs in dep.holders for v in hs]
    reported = tuple((v, market.actor(v).report_usage(model_id)) for v in dict.fromkeys(involved))
    add(Claim(provider.vid, ClaimKind.UNDER_REPORTED_USAGE, model_id=model_id, reported_counts=reported))
    return claims
