"""Dispute resolution over the ledger plus escrowed fragments.

The arbitrator is a fixed procedure. It checks the chain, rebuilds the
execution trace of the disputed invocation, and walks a list of checks in a
fixed order; the first check that fails names the culpable party. Every
verdict cites ledger records and the hash comparisons it relied on.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

from .encoding import hash_value, sha256
from .ledger import (
    ApiInvocation,
    ExecutionStep,
    ExecutionStepHashed,
    Ledger,
    ModelDeployment,
    Record,
    VirtualId,
)
from .model_ir import ModelError, ModelGraph, compose, decode_graph, evaluate
from .scenario import Injection, Scenario

ALL_HONEST = "AllHonest"
CULPABLE = "Culpable"


class ClaimKind:
    WRONG_OUTPUT = "WrongOutput"
    WRONG_INPUT = "WrongInput"
    COMPONENT_TAMPERED = "ComponentTampered"
    STEP_SKIPPED = "StepSkipped"
    UNDER_REPORTED_USAGE = "UnderReportedUsage"
    MODEL_THEFT_ATTEMPT = "ModelTheftAttempt"

    ALL = (
        WRONG_OUTPUT,
        WRONG_INPUT,
        COMPONENT_TAMPERED,
        STEP_SKIPPED,
        UNDER_REPORTED_USAGE,
        MODEL_THEFT_ATTEMPT,
    )


class AuditError(Exception):
    pass


class UnknownInvocation(AuditError, KeyError):
    pass


class LedgerCorrupted(AuditError):
    def __init__(self, seq: int):
        super().__init__(f"ledger chain breaks at seq {seq}")
        self.seq = seq


class MissingFragments(AuditError):
    """A pooled fragment set does not cover every component."""

    def __init__(self, missing: Sequence[int]):
        super().__init__(f"no fragment for components {list(missing)}")
        self.missing = tuple(missing)


# -- escrow ------------------------------------------------------------------------


class Escrow:
    """Exact fragment bytes as delivered to vendors, held for the arbitrator."""

    def __init__(self) -> None:
        self._items: dict[tuple[str, int], tuple[bytes, VirtualId]] = {}

    def deposit(self, model_id: str, index: int, encoding: bytes, depositor: bytes) -> None:
        self._items[(model_id, index)] = (bytes(encoding), VirtualId(bytes(depositor)))

    def has(self, model_id: str, index: int | None = None) -> bool:
        if index is not None:
            return (model_id, index) in self._items
        return any(m == model_id for m, _ in self._items)

    def encoding(self, model_id: str, index: int) -> bytes:
        return self._items[(model_id, index)][0]

    def depositor(self, model_id: str, index: int) -> VirtualId:
        return self._items[(model_id, index)][1]

    def component_hash(self, model_id: str, index: int) -> bytes:
        return sha256(self.encoding(model_id, index))

    def fragment(self, model_id: str, index: int) -> ModelGraph:
        return decode_graph(self.encoding(model_id, index))

    def to_json(self) -> dict:
        out: dict[str, dict[str, Any]] = {}
        for (model, index), (enc, who) in sorted(self._items.items()):
            out.setdefault(model, {})[str(index)] = {"depositor": who.hex(), "encoding": enc.hex()}
        return out

    @classmethod
    def from_json(cls, doc: dict) -> Escrow:
        esc = cls()
        for model, items in doc.items():
            for index, item in items.items():
                esc.deposit(model, int(index), bytes.fromhex(item["encoding"]), bytes.fromhex(item["depositor"]))
        return esc


# -- claims and verdicts -------------------------------------------------------------


def _vid_or_none(raw: str | None) -> VirtualId | None:
    return None if raw is None else VirtualId(bytes.fromhex(raw))


def _value_json(v: Sequence[float] | None) -> list[str] | None:
    return None if v is None else [repr(float(x)) for x in v]


def _value_from_json(v: list | None) -> tuple[float, ...] | None:
    return None if v is None else tuple(float(x) for x in v)


@dataclass(frozen=True)
class Claim:
    claimant: VirtualId
    kind: str
    invocation_id: str | None = None
    model_id: str | None = None
    # data the claimant discloses to the arbitrator
    revealed_input: tuple[float, ...] | None = None
    revealed_output: tuple[float, ...] | None = None
    asserted_signature: bytes | None = None
    reported_counts: tuple[tuple[VirtualId, int], ...] = ()
    suspect_model_id: str | None = None
    dispute_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ClaimKind.ALL:
            raise ValueError(f"unknown claim kind {self.kind!r}")

    def to_json(self) -> dict:
        return {
            "claimant": self.claimant.hex(),
            "kind": self.kind,
            "invocation_id": self.invocation_id,
            "model_id": self.model_id,
            "revealed_input": _value_json(self.revealed_input),
            "revealed_output": _value_json(self.revealed_output),
            "asserted_signature": None if self.asserted_signature is None else self.asserted_signature.hex(),
            "reported_counts": [[v.hex(), c] for v, c in self.reported_counts],
            "suspect_model_id": self.suspect_model_id,
            "dispute_id": self.dispute_id,
        }

    @classmethod
    def from_json(cls, doc: dict) -> Claim:
        sig = doc.get("asserted_signature")
        return cls(
            claimant=VirtualId(bytes.fromhex(doc["claimant"])),
            kind=doc["kind"],
            invocation_id=doc.get("invocation_id"),
            model_id=doc.get("model_id"),
            revealed_input=_value_from_json(doc.get("revealed_input")),
            revealed_output=_value_from_json(doc.get("revealed_output")),
            asserted_signature=None if sig is None else bytes.fromhex(sig),
            reported_counts=tuple((VirtualId(bytes.fromhex(v)), int(c)) for v, c in doc.get("reported_counts", ())),
            suspect_model_id=doc.get("suspect_model_id"),
            dispute_id=doc.get("dispute_id"),
        )


@dataclass(frozen=True)
class Evidence:
    """One cited ledger record and, optionally, a comparison against one of its fields.

    ``field`` names a payload field (``name`` or ``name.index`` for list
    fields); ``ledger_value`` is :func:`field_digest` of that field and
    ``compared_value`` is what the arbitrator compared it with.
    """

    seq: int
    check: str
    field: str | None = None
    ledger_value: str | None = None
    compared_value: str | None = None
    matches: bool | None = None

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "check": self.check,
            "field": self.field,
            "ledger_value": self.ledger_value,
            "compared_value": self.compared_value,
            "matches": self.matches,
        }

    @classmethod
    def from_json(cls, doc: dict) -> Evidence:
        return cls(**doc)


@dataclass(frozen=True)
class Verdict:
    outcome: str
    culpable: VirtualId | None
    reason: str
    evidence: tuple[Evidence, ...]
    claim: Claim | None = None

    @property
    def is_culpable(self) -> bool:
        return self.outcome == CULPABLE

    def to_json(self) -> dict:
        return {
            "claim": None if self.claim is None else self.claim.to_json(),
            "outcome": self.outcome,
            "culpable": None if self.culpable is None else self.culpable.hex(),
            "reason": self.reason,
            "evidence": [e.to_json() for e in self.evidence],
        }

    @classmethod
    def from_json(cls, doc: dict) -> Verdict:
        return cls(
            outcome=doc["outcome"],
            culpable=_vid_or_none(doc.get("culpable")),
            reason=doc["reason"],
            evidence=tuple(Evidence.from_json(e) for e in doc["evidence"]),
            claim=None if doc.get("claim") is None else Claim.from_json(doc["claim"]),
        )


def field_digest(record: Record, name: str) -> str | None:
    """Printable digest of one payload field: hex for hashes, value hashes for vectors."""
    index = None
    if "." in name:
        name, idx = name.split(".", 1)
        index = int(idx)
    v = getattr(record, name)
    if index is not None:
        v = v[index]
    if v is None:
        return None
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, (int, str)):
        return str(v)
    return hash_value(v).hex()


def evidence_holds(ledger: Ledger, ev: Evidence) -> bool:
    """Re-check a cited comparison against the ledger."""
    if not 0 <= ev.seq < len(ledger):
        return False
    if ev.field is None:
        return True
    actual = field_digest(ledger[ev.seq].payload, ev.field)
    if actual != ev.ledger_value:
        return False
    return ev.matches is None or ev.matches == (ev.ledger_value == ev.compared_value)


# -- traces ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceStep:
    seq: int
    step_index: int
    vendor: VirtualId
    author: VirtualId
    component_hash: bytes
    input: tuple[float, ...] | None = None
    output: tuple[float, ...] | None = None
    input_hash: bytes | None = None
    output_hash: bytes | None = None


@dataclass(frozen=True)
class ExecutionTrace:
    invocation_id: str
    model_id: str
    protocol: str
    deployment_seq: int
    deployment: ModelDeployment
    invocation_seq: int
    invocation: ApiInvocation
    steps: tuple[TraceStep, ...]
    final_seq: int | None = None
    final: Record | None = None
    missing: tuple[int, ...] = ()

    @property
    def complete(self) -> bool:
        return not self.missing

    def to_json(self) -> dict:
        return {
            "invocation_id": self.invocation_id,
            "model_id": self.model_id,
            "protocol": self.protocol,
            "deployment_seq": self.deployment_seq,
            "invocation_seq": self.invocation_seq,
            "steps": [
                {
                    "seq": s.seq,
                    "step_index": s.step_index,
                    "vendor": s.vendor.hex(),
                    "component_hash": s.component_hash.hex(),
                    "input": _value_json(s.input),
                    "output": _value_json(s.output),
                    "input_hash": None if s.input_hash is None else s.input_hash.hex(),
                    "output_hash": None if s.output_hash is None else s.output_hash.hex(),
                }
                for s in self.steps
            ],
            "final_seq": self.final_seq,
            "missing": list(self.missing),
        }


def reconstruct_trace(ledger: Ledger, invocation_id: str) -> ExecutionTrace:
    found = ledger.invocation(invocation_id)
    if found is None:
        raise UnknownInvocation(invocation_id)
    inv_seq, inv = found
    dep_seq, dep = ledger.deployment(inv.model_id)
    steps = []
    for index, (seq, rec) in ledger.steps(invocation_id).items():
        author = ledger[seq].author
        if rec.KIND == "ExecutionStep":
            steps.append(TraceStep(seq, index, rec.vendor, author, rec.component_hash, input=rec.input, output=rec.output))
        else:
            steps.append(
                TraceStep(
                    seq, index, rec.vendor, author, rec.component_hash,
                    input_hash=rec.input_hash, output_hash=rec.output_hash,
                )
            )
    steps.sort(key=lambda s: s.seq)
    have = {s.step_index for s in steps}
    missing = tuple(i for i in range(1, dep.num_components + 1) if i not in have)
    final = ledger.final(invocation_id)
    return ExecutionTrace(
        invocation_id,
        inv.model_id,
        dep.protocol,
        dep_seq,
        dep,
        inv_seq,
        inv,
        tuple(steps),
        final[0] if final else None,
        final[1] if final else None,
        missing,
    )


# -- resolution -----------------------------------------------------------------------


class _Decided(Exception):
    def __init__(self, culpable: VirtualId, reason: str):
        self.culpable = culpable
        self.reason = reason


def resolve(
    claim: Claim,
    ledger: Ledger,
    escrow: Escrow | None = None,
    reveals: Mapping[bytes, Mapping[str, Any]] | None = None,
) -> Verdict:
    """Decide ``claim`` from the ledger, the escrow and any third-party reveals.

    ``reveals`` maps a party's virtual id to what it discloses. Under hashed
    execution the orchestrator's transcript (``{"holders": {i: vid},
    "steps": {i: (D_i, O_i)}}``) is required; a missing transcript makes the
    orchestrator culpable.
    """
    bad = ledger.verify_chain()
    if bad is not None:
        raise LedgerCorrupted(bad)
    if claim.kind == ClaimKind.UNDER_REPORTED_USAGE:
        return usage_audit(ledger, claim.model_id, dict(claim.reported_counts), claim=claim)
    if claim.kind == ClaimKind.MODEL_THEFT_ATTEMPT:
        return _resolve_theft(claim, ledger)
    if claim.invocation_id is None:
        return _resolve_deployment(claim, ledger, escrow)
    trace = reconstruct_trace(ledger, claim.invocation_id)
    evidence: list[Evidence] = []
    try:
        _check_invocation(claim, trace, escrow or Escrow(), reveals or {}, evidence)
    except _Decided as d:
        return Verdict(CULPABLE, d.culpable, d.reason, tuple(evidence), claim)
    if not evidence:
        evidence.append(Evidence(trace.invocation_seq, "invocation on record"))
    return Verdict(ALL_HONEST, None, "all checks passed", tuple(evidence), claim)


def _cite(evidence: list[Evidence], seq: int, check: str, record: Record, field_name: str, compared: str | None) -> bool:
    ledger_value = field_digest(record, field_name)
    ok = ledger_value == compared
    evidence.append(Evidence(seq, check, field_name, ledger_value, compared, ok))
    return ok


def _check_escrow(dep_seq: int, dep: ModelDeployment, escrow: Escrow, evidence: list[Evidence]) -> None:
    provider = dep.providers[0]
    for i in range(1, dep.num_components + 1):
        if not escrow.has(dep.model_id, i):
            evidence.append(Evidence(dep_seq, f"escrow holds component {i}", matches=False))
            raise _Decided(provider, "escrow withheld")
        got = escrow.component_hash(dep.model_id, i).hex()
        if not _cite(evidence, dep_seq, f"escrowed component {i} against leaf", dep, f"component_leaf_hashes.{i - 1}", got):
            raise _Decided(escrow.depositor(dep.model_id, i), "delivered components do not match the recorded signature")


def _check_invocation(
    claim: Claim,
    trace: ExecutionTrace,
    escrow: Escrow,
    reveals: Mapping[bytes, Mapping[str, Any]],
    evidence: list[Evidence],
) -> None:
    dep, hashed = trace.deployment, trace.protocol == "B"
    n = dep.num_components

    # sequence and authorship
    for pos, st in enumerate(trace.steps):
        allowed = dep.holders[st.step_index - 1] if hashed else (dep.sequence[st.step_index - 1],)
        if st.step_index != pos + 1 or st.author != st.vendor or st.vendor not in allowed:
            evidence.append(Evidence(st.seq, "step order and author", matches=False))
            raise _Decided(st.author, "step recorded out of order or by an unassigned vendor")

    # component hashes against deployment leaves
    for st in trace.steps:
        rec = _ledger_record(trace, st)
        leaf = dep.component_leaf_hashes[st.step_index - 1].hex()
        if not _cite(evidence, st.seq, f"component hash of step {st.step_index}", rec, "component_hash", leaf):
            raise _Decided(st.vendor, "wrong component")

    # provider's escrow against the signed leaves
    _check_escrow(trace.deployment_seq, dep, escrow, evidence)

    transcript = None
    if hashed:
        transcript = reveals.get(dep.orchestrator)
        if transcript is None:
            evidence.append(Evidence(trace.invocation_seq, "orchestrator transcript revealed", matches=False))
            raise _Decided(dep.orchestrator, "withheld evidence")

    # completeness
    if trace.missing:
        k = trace.missing[0]
        cite = trace.steps[-1].seq if trace.steps else trace.invocation_seq
        evidence.append(Evidence(cite, f"step {k} never recorded", matches=False))
        if hashed:
            assigned = dict(transcript.get("holders", {})).get(k)
            if assigned is None or assigned not in dep.holders[k - 1]:
                raise _Decided(dep.orchestrator, f"step {k} was never dispatched")
            raise _Decided(VirtualId(bytes(assigned)), f"skipped step {k}")
        raise _Decided(dep.sequence[k - 1], f"skipped step {k}")

    # the claimant's own disclosures
    if claim.revealed_input is not None:
        if not _cite(
            evidence, trace.invocation_seq, "revealed input against record", trace.invocation,
            "input_hash" if hashed else "input", hash_value(claim.revealed_input).hex(),
        ):
            raise _Decided(claim.claimant, "misstated input")
    if claim.revealed_output is not None:
        last = trace.steps[-1]
        if not _cite(
            evidence, last.seq, "revealed output against record", _ledger_record(trace, last),
            "output_hash" if hashed else "output", hash_value(claim.revealed_output).hex(),
        ):
            raise _Decided(claim.claimant, "forged output")
    if claim.asserted_signature is not None:
        if not _cite(evidence, trace.deployment_seq, "asserted signature", dep, "signature", claim.asserted_signature.hex()):
            raise _Decided(claim.claimant, "repudiates the recorded deployment")

    # third-party disclosures
    data: dict[int, tuple[tuple[float, ...], tuple[float, ...]]] = {}
    for st in trace.steps:
        rec = _ledger_record(trace, st)
        if hashed:
            pair = dict(transcript.get("steps", {})).get(st.step_index)
            if pair is None:
                evidence.append(Evidence(st.seq, f"transcript of step {st.step_index}", matches=False))
                raise _Decided(dep.orchestrator, "withheld evidence")
            d, o = tuple(pair[0]), tuple(pair[1])
            ok = _cite(evidence, st.seq, f"revealed input of step {st.step_index}", rec, "input_hash", hash_value(d).hex())
            ok = ok and _cite(evidence, st.seq, f"revealed output of step {st.step_index}", rec, "output_hash", hash_value(o).hex())
            if not ok:
                raise _Decided(dep.orchestrator, "revealed data does not match the ledger")
            data[st.step_index] = (d, o)
        else:
            data[st.step_index] = (st.input, st.output)

    # recomputation from escrow
    for st in trace.steps:
        d, _ = data[st.step_index]
        try:
            got = hash_value(evaluate(escrow.fragment(trace.model_id, st.step_index), d)).hex()
        except ModelError:
            got = "unevaluable"
        if not _cite(
            evidence, st.seq, f"recomputed step {st.step_index}", _ledger_record(trace, st),
            "output_hash" if hashed else "output", got,
        ):
            raise _Decided(st.vendor, "output does not match the deployed component")


def _ledger_record(trace: ExecutionTrace, st: TraceStep) -> Record:
    if trace.protocol == "B":
        return ExecutionStepHashed(trace.invocation_id, st.step_index, st.input_hash, st.output_hash, st.component_hash, st.vendor)
    return ExecutionStep(trace.invocation_id, st.step_index, st.input, st.output, st.component_hash, st.vendor)


def _resolve_deployment(claim: Claim, ledger: Ledger, escrow: Escrow | None) -> Verdict:
    """Claims about a model as deployed, not about one invocation."""
    found = ledger.deployment(claim.model_id) if claim.model_id else None
    if found is None:
        raise AuditError("claim references neither an invocation nor a deployed model")
    dep_seq, dep = found
    evidence: list[Evidence] = []
    try:
        _check_escrow(dep_seq, dep, escrow or Escrow(), evidence)
        if claim.asserted_signature is not None:
            if not _cite(evidence, dep_seq, "asserted signature", dep, "signature", claim.asserted_signature.hex()):
                raise _Decided(claim.claimant, "repudiates the recorded deployment")
    except _Decided as d:
        return Verdict(CULPABLE, d.culpable, d.reason, tuple(evidence), claim)
    return Verdict(ALL_HONEST, None, "deployment matches escrow", tuple(evidence), claim)


def _resolve_theft(claim: Claim, ledger: Ledger) -> Verdict:
    found = ledger.deployment(claim.model_id)
    if found is None:
        raise AuditError(f"unknown model {claim.model_id!r}")
    seq, orig = found
    leaves = set(orig.component_leaf_hashes)
    suspects = ledger.deployments()
    if claim.suspect_model_id is not None:
        suspects = [d for d in suspects if d[1].model_id == claim.suspect_model_id]
    evidence = [Evidence(seq, "original deployment", "signature", orig.signature.hex(), orig.signature.hex(), True)]
    for s_seq, dep in suspects:
        if dep.model_id == orig.model_id:
            continue
        author = ledger[s_seq].author
        if author in orig.providers:
            continue
        reused = [j for j, h in enumerate(dep.component_leaf_hashes) if h in leaves]
        if reused:
            for j in reused:
                h = dep.component_leaf_hashes[j].hex()
                evidence.append(Evidence(s_seq, "component reused from original", f"component_leaf_hashes.{j}", h, h, True))
            return Verdict(CULPABLE, author, "redeploys components of another provider's model", tuple(evidence), claim)
    return Verdict(ALL_HONEST, None, "no deployment reuses the model's components", tuple(evidence), claim)


def usage_audit(
    ledger: Ledger,
    model_id: str,
    reported: Mapping[bytes, int],
    claim: Claim | None = None,
) -> Verdict:
    """Compare vendor-reported invocation counts with the ledger's count."""
    found = ledger.deployment(model_id)
    if found is None:
        raise AuditError(f"unknown model {model_id!r}")
    seq, dep = found
    actual = ledger.usage_count(model_id)
    evidence: list[Evidence] = []
    for vid in sorted(reported, key=bytes):
        count = int(reported[vid])
        ev = Evidence(seq, "usage count", None, str(actual), str(count), count == actual)
        if count != actual:
            reason = "under-reporting" if count < actual else "over-reporting"
            return Verdict(CULPABLE, VirtualId(bytes(vid)), reason, (ev,), claim)
        evidence.append(ev)
    if not evidence:
        evidence.append(Evidence(seq, "usage count", None, str(actual), None, None))
    return Verdict(ALL_HONEST, None, "reported usage matches the ledger", tuple(evidence), claim)


# -- collusion --------------------------------------------------------------------------


def pool_fragments(
    holdings: Mapping[bytes, Mapping[int, ModelGraph]],
    coalition: Sequence[bytes],
    n: int,
    model_id: str | None = None,
) -> ModelGraph:
    """Compose the coalition's pooled fragments into a runnable model.

    Raises :class:`MissingFragments` unless the coalition holds all ``n``.
    """
    pooled: dict[int, ModelGraph] = {}
    for vid in coalition:
        pooled.update(holdings.get(vid, {}))
    missing = [i for i in range(1, n + 1) if i not in pooled]
    if missing:
        raise MissingFragments(missing)
    return compose([pooled[i] for i in range(1, n + 1)], model_id)


# -- adversary catalog ------------------------------------------------------------------


@dataclass(frozen=True)
class Behavior:
    name: str
    party: str  # role that becomes culpable
    claim_kind: str
    description: str


CATALOG: dict[str, Behavior] = {
    b.name: b
    for b in (
        Behavior("vendor_tampers_component", "vendor", ClaimKind.WRONG_OUTPUT,
                 "runs a bit-flipped copy of its fragment while recording the deployed hash"),
        Behavior("vendor_skips_step", "vendor", ClaimKind.STEP_SKIPPED,
                 "never executes its step, stalling the invocation"),
        Behavior("vendor_substitutes_output", "vendor", ClaimKind.WRONG_OUTPUT,
                 "reports an output other than its fragment's result"),
        Behavior("vendor_underreports_usage", "vendor", ClaimKind.UNDER_REPORTED_USAGE,
                 "reports fewer invocations than the ledger holds"),
        Behavior("vendors_collude_reconstruct", "vendor", ClaimKind.MODEL_THEFT_ATTEMPT,
                 "a coalition pools fragments and redeploys what it holds as its own model"),
        Behavior("provider_deploys_wrong_model", "provider", ClaimKind.COMPONENT_TAMPERED,
                 "delivers a fragment that differs from the signed deployment"),
        Behavior("provider_repudiates_version", "provider", ClaimKind.COMPONENT_TAMPERED,
                 "later asserts a different model signature than the one on record"),
        Behavior("consumer_forges_output_claim", "consumer", ClaimKind.WRONG_OUTPUT,
                 "claims a wrong output using a forged value"),
        Behavior("consumer_misstates_input", "consumer", ClaimKind.WRONG_INPUT,
                 "claims to have sent a different input"),
    )
}


def inject_adversary(scenario: Scenario, behavior: str, target: int | None = None, **params: Any) -> Scenario:
    """Return ``scenario`` with ``behavior`` active; see :data:`CATALOG` for the expected culprit."""
    if behavior not in CATALOG:
        raise ValueError(f"unknown adversary behavior {behavior!r}")
    return replace(scenario, adversaries=scenario.adversaries + (Injection(behavior, target, dict(params)),))


def expected_party(behavior: str) -> str:
    return CATALOG[behavior].party
