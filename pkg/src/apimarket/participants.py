"""Marketplace actors and the identity registry.

Actors never touch each other directly. They react to ledger notifications
and transport messages, and reach other parties only through endpoints the
registry agrees to reveal.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Any, Sequence

from .audit import ClaimKind, Escrow
from .encoding import as_value, hash_value, sha256
from .ledger import (
    ApiInvocation,
    DisputeOpened,
    ExecutionStep,
    ExecutionStepHashed,
    FinalOutputHashed,
    Ledger,
    ModelDeployment,
    Record,
    ValidationRejected,
    VirtualId,
    model_filter,
)
from .model_ir import ModelError, ModelGraph, canonical_encode, decode_graph, evaluate, flip_bit, hash_component
from .partitioner import (
    InsufficientVendors,
    PartitionPlan,
    joint_plan,
    partition,
    place_overlapping,
    place_sequential,
)
from .protocol import InvocationContext, choose_subset
from .transport import FINAL_OUTPUT, FRAGMENT, INVOKE, STEP_INPUT, STEP_OUTPUT, Transport, TransportMessage

log = logging.getLogger(__name__)

ROLES = ("provider", "vendor", "consumer", "orchestrator")


class Denied(PermissionError):
    pass


@dataclass(frozen=True)
class OffChainIdentity:
    endpoint: str
    role: str


class IdentityRegistry:
    """Maps virtual ids to off-chain identities and decides who may resolve whom.

    Orchestrators are publicly resolvable. Anything else must be granted
    explicitly, and no vendor can ever be granted another vendor.
    """

    def __init__(self, salt: bytes):
        self._salt = salt
        self._ids: dict[VirtualId, OffChainIdentity] = {}
        self._grants: set[tuple[VirtualId, VirtualId]] = set()
        self.denials: list[tuple[VirtualId, VirtualId]] = []

    def register(self, endpoint: str, role: str) -> VirtualId:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        vid = VirtualId.derive(endpoint, self._salt)
        if vid in self._ids:
            raise ValueError(f"{endpoint} is already registered")
        self._ids[vid] = OffChainIdentity(endpoint, role)
        return vid

    def role_of(self, vid: bytes) -> str:
        return self._ids[VirtualId(bytes(vid))].role

    def members(self, role: str | None = None) -> list[VirtualId]:
        return [v for v, ident in self._ids.items() if role is None or ident.role == role]

    def grant(self, viewer: bytes, target: bytes) -> None:
        viewer, target = VirtualId(bytes(viewer)), VirtualId(bytes(target))
        if self.role_of(viewer) == "vendor" and self.role_of(target) == "vendor" and viewer != target:
            raise Denied("vendors may not learn each other's identities")
        self._grants.add((viewer, target))

    def visible(self, requester: bytes, target: bytes) -> bool:
        requester, target = VirtualId(bytes(requester)), VirtualId(bytes(target))
        if target not in self._ids:
            return False
        if requester == target or self._ids[target].role == "orchestrator":
            return True
        return (requester, target) in self._grants

    def lookup(self, requester: bytes, target: bytes) -> OffChainIdentity:
        if not self.visible(requester, target):
            self.denials.append((VirtualId(bytes(requester)), VirtualId(bytes(target))))
            raise Denied(f"{bytes(requester).hex()[:8]} may not resolve {bytes(target).hex()[:8]}")
        return self._ids[VirtualId(bytes(target))]


class Actor:
    role = ""

    def __init__(self, market, name: str):
        self.market = market
        self.name = name
        self.endpoint = f"{self.role}://{name}"
        self.vid = market.registry.register(self.endpoint, self.role)
        self.subscription = None

    @property
    def ledger(self) -> Ledger:
        return self.market.ledger

    @property
    def transport(self) -> Transport:
        return self.market.transport

    def poll(self) -> None:
        for msg in self.transport.receive(self.endpoint):
            self.on_message(msg)
        if self.subscription is not None:
            for env in self.subscription.poll():
                self.on_record(env.seq, env.payload)

    def pending(self) -> bool:
        return self.subscription is not None and self.subscription.pending()

    def on_message(self, msg: TransportMessage) -> None:
        pass

    def on_record(self, seq: int, record: Record) -> None:
        pass

    def append(self, record: Record) -> int | None:
        try:
            return self.ledger.append(record, self.vid)
        except ValidationRejected as exc:
            log.info("%s: %s rejected (%s)", self.endpoint, record.KIND, exc.reason)
            return None

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


# -- provider -----------------------------------------------------------------------------


class Provider(Actor):
    role = "provider"

    def __init__(self, market, name: str, behavior: str | None = None, rng: random.Random | None = None):
        super().__init__(market, name)
        self.behavior = behavior
        self.rng = rng or random.Random(0)
        self.plans: dict[str, PartitionPlan] = {}

    def deploy(
        self,
        model: ModelGraph,
        strategy: str,
        vendors: Sequence[bytes],
        protocol: str = "A",
        n: int | None = None,
        replication: int | None = None,
        orchestrator: bytes | None = None,
        **kwargs: Any,
    ) -> PartitionPlan:
        """Partition ``model``, place the fragments, sign the deployment and ship it."""
        protocol = protocol.upper()
        if n is None:
            n = len(vendors)
        plan = partition(model, strategy, n, **kwargs)
        return deploy_plan(self.market, [self], [plan], vendors, protocol, replication, orchestrator, model.model_id)


def _placement(plan: PartitionPlan, vendors: Sequence[bytes], protocol: str, replication: int | None) -> dict[int, tuple[bytes, ...]]:
    if protocol == "A":
        return place_sequential(plan.n, vendors)
    if replication is None:
        replication = 2
    return place_overlapping(plan.n, replication, vendors)


def deploy_plan(
    market,
    providers: Sequence[Provider],
    plans: Sequence[PartitionPlan],
    vendors: Sequence[bytes],
    protocol: str,
    replication: int | None,
    orchestrator: bytes | None,
    model_id: str,
) -> PartitionPlan:
    """Place and publish one or more providers' plans as a single deployment.

    With several providers each contributes the consecutive components of its
    own plan; the on-ledger record lists every contributor.
    """
    if len(plans) == 1 and plans[0].model_id == model_id:
        plan = plans[0]
    else:
        plan = joint_plan(plans, model_id)
    owner = [p for p, sub in zip(providers, plans) for _ in range(sub.n)]
    placement = _placement(plan, vendors, protocol, replication)
    if protocol == "B" and orchestrator is None:
        raise InsufficientVendors("hashed execution needs an orchestrator")
    plan = plan.with_placement(placement)

    # what each component's owner actually ships; a dishonest owner may ship something else
    delivered: dict[int, bytes] = {}
    for comp in plan.components:
        frag = comp.fragment
        prov = owner[comp.index - 1]
        if prov.behavior == "wrong_model" and comp.index == 1:
            frag = flip_bit(frag, prov.rng)
        delivered[comp.index] = canonical_encode(frag)

    lead = providers[0]
    record = ModelDeployment(
        model_id=model_id,
        signature=plan.signature.root,
        sequence=tuple(VirtualId(bytes(placement[i][0])) for i in range(1, plan.n + 1)) if protocol == "A" else (),
        component_leaf_hashes=plan.signature.leaf_hashes,
        num_components=plan.n,
        protocol=protocol,
        holders=tuple(tuple(VirtualId(bytes(v)) for v in placement[i]) for i in range(1, plan.n + 1)) if protocol == "B" else (),
        providers=tuple(p.vid for p in dict.fromkeys(providers)),
        orchestrator=None if orchestrator is None else VirtualId(bytes(orchestrator)),
    )
    market.ledger.append(record, lead.vid)

    for i in range(1, plan.n + 1):
        prov = owner[i - 1]
        market.escrow.deposit(model_id, i, delivered[i], prov.vid)
        for vendor in placement[i]:
            market.registry.grant(prov.vid, vendor)
            if orchestrator is not None:
                market.registry.grant(orchestrator, vendor)
            ident = market.registry.lookup(prov.vid, vendor)
            market.transport.send(prov.endpoint, ident.endpoint, FRAGMENT, model_id=model_id, index=i, encoding=delivered[i])
    for prov in providers:
        prov.plans[model_id] = plan
    return plan


# -- vendor -------------------------------------------------------------------------------


@dataclass
class StepLog:
    invocation_id: str
    step_index: int
    seq: int | None


class Vendor(Actor):
    """Hosts fragments and executes steps.

    ``behavior`` switches on one of the dishonest variants: ``tamper``,
    ``skip``, ``substitute`` or ``underreport``.
    """

    role = "vendor"

    def __init__(self, market, name: str, behavior: str | None = None, rng: random.Random | None = None):
        super().__init__(market, name)
        self.behavior = behavior
        self.rng = rng or random.Random(0)
        self.held: dict[tuple[str, int], ModelGraph] = {}
        self.execution_log: list[StepLog] = []
        self.disputes: list[str] = []
        self._filter = model_filter(market.ledger, ())
        self.subscription = market.ledger.subscribe(self._filter)
        self._tampered: dict[tuple[str, int], ModelGraph] = {}

    # fragments arrive off-chain
    def on_message(self, msg: TransportMessage) -> None:
        body = msg.body
        if msg.kind == FRAGMENT:
            self.held[(body["model_id"], body["index"])] = decode_graph(body["encoding"])
            self._filter.models.add(body["model_id"])
        elif msg.kind == STEP_INPUT:
            out = self._execute(body["model_id"], body["invocation_id"], body["index"], as_value(body["input"]))
            if out is not None:
                self.transport.send(
                    self.endpoint, msg.sender, STEP_OUTPUT,
                    invocation_id=body["invocation_id"], index=body["index"], output=out,
                )

    def on_record(self, seq: int, record: Record) -> None:
        if record.KIND == "ApiInvocation":
            dep = self._deployment(record.model_id)
            if dep is not None and dep.protocol == "A" and dep.sequence[0] == self.vid:
                self._execute(record.model_id, record.invocation_id, 1, record.input)
        elif record.KIND == "ExecutionStep":
            model_id = self.ledger.model_of(record)
            dep = self._deployment(model_id)
            i = record.step_index
            if dep is not None and i < dep.num_components and dep.sequence[i] == self.vid:
                self._execute(model_id, record.invocation_id, i + 1, record.output)

    def _deployment(self, model_id: str | None) -> ModelDeployment | None:
        found = self.ledger.deployment(model_id) if model_id else None
        return None if found is None else found[1]

    def _execute(self, model_id: str, invocation_id: str, index: int, x: tuple[float, ...]) -> tuple[float, ...] | None:
        dep = self._deployment(model_id)
        frag = self.held.get((model_id, index))
        if dep is None or frag is None:
            return None
        leaf = dep.component_leaf_hashes[index - 1]
        if hash_component(frag) != leaf:
            # what we were given is not what was signed: refuse and complain
            self._dispute(model_id)
            return None
        if self.behavior == "skip":
            self.execution_log.append(StepLog(invocation_id, index, None))
            return None
        try:
            out = evaluate(frag, x)
            if self.behavior == "tamper":
                out = self._run_tampered(model_id, index, frag, x, out)
            elif self.behavior == "substitute":
                out = (out[0] + 1.0,) + out[1:]
        except ModelError as exc:
            log.info("%s: step %d of %s failed: %s", self.endpoint, index, invocation_id, exc)
            return None
        if dep.protocol == "A":
            rec = ExecutionStep(invocation_id, index, x, out, leaf, self.vid)
        else:
            rec = ExecutionStepHashed(invocation_id, index, hash_value(x), hash_value(out), leaf, self.vid)
        seq = self.append(rec)
        self.execution_log.append(StepLog(invocation_id, index, seq))
        return out if seq is not None else None

    def _run_tampered(self, model_id: str, index: int, frag: ModelGraph, x, honest):
        """Evaluate a bit-flipped copy; the flip is chosen so that it changes this output."""
        key = (model_id, index)
        bad = self._tampered.get(key)
        if bad is not None:
            try:
                out = evaluate(bad, x)
                if out != honest:
                    return out
            except ModelError:
                pass
        for _ in range(32):
            bad = flip_bit(frag, self.rng)
            try:
                out = evaluate(bad, x)
            except ModelError:
                continue
            if out != honest:
                self._tampered[key] = bad
                return out
        # no single flip shows on this input; fall back to a shifted output
        return (honest[0] + 1.0,) + honest[1:]

    def _dispute(self, model_id: str) -> None:
        if model_id in self.disputes:
            return
        dispute_id = f"D-{model_id}-{self.vid.short}"
        if self.append(DisputeOpened(dispute_id, self.vid, ClaimKind.COMPONENT_TAMPERED, model_id=model_id)) is not None:
            self.disputes.append(model_id)

    def holdings(self, model_id: str) -> dict[int, ModelGraph]:
        return {i: g for (m, i), g in self.held.items() if m == model_id}

    def report_usage(self, model_id: str) -> int:
        count = self.ledger.usage_count(model_id)
        if self.behavior == "underreport" and count:
            return count - max(1, count // 2)
        return count


# -- consumer -----------------------------------------------------------------------------


class Consumer(Actor):
    role = "consumer"

    def __init__(self, market, name: str):
        super().__init__(market, name)
        self.received: dict[str, tuple[float, ...]] = {}
        self.inputs: dict[str, tuple[float, ...]] = {}

    def on_message(self, msg: TransportMessage) -> None:
        if msg.kind == FINAL_OUTPUT:
            self.received[msg.body["invocation_id"]] = as_value(msg.body["output"])

    def invoke(self, model_id: str, x: Sequence[float]) -> tuple[float, ...]:
        return self.market.invoke(self, model_id, x)


# -- orchestrator -------------------------------------------------------------------------


@dataclass
class Transcript:
    input: tuple[float, ...]
    reply_to: str
    holders: dict[int, VirtualId]
    steps: dict[int, tuple[tuple[float, ...], tuple[float, ...]]] = field(default_factory=dict)
    output: tuple[float, ...] | None = None

    def reveal(self) -> dict[str, Any]:
        return {"holders": dict(self.holders), "steps": dict(self.steps)}


def invocation_seed(seed: int, invocation_id: str) -> int:
    return int.from_bytes(sha256(f"{seed}:{invocation_id}".encode())[:8], "big")


class Orchestrator(Actor):
    """Routes hashed-protocol invocations through a random holder per component."""

    role = "orchestrator"

    def __init__(self, market, name: str, seed: int = 0):
        super().__init__(market, name)
        self.seed = seed
        self.contexts: dict[str, InvocationContext] = {}
        self.transcripts: dict[str, Transcript] = {}

    def draw(self, dep: ModelDeployment, invocation_id: str) -> dict[int, VirtualId]:
        placement = {i + 1: hs for i, hs in enumerate(dep.holders)}
        return choose_subset(placement, random.Random(invocation_seed(self.seed, invocation_id)))

    def on_message(self, msg: TransportMessage) -> None:
        body = msg.body
        if msg.kind == INVOKE:
            self._start(body["invocation_id"], as_value(body["input"]), msg.sender)
        elif msg.kind == STEP_OUTPUT:
            self._advance(body["invocation_id"], body["index"], as_value(body["output"]))

    def _start(self, invocation_id: str, x: tuple[float, ...], reply_to: str) -> None:
        found = self.ledger.invocation(invocation_id)
        if found is None or invocation_id in self.transcripts:
            return
        inv = found[1]
        dep = self.ledger.deployment(inv.model_id)[1]
        if dep.orchestrator != self.vid or inv.input_hash != hash_value(x):
            log.info("%s: refusing %s", self.endpoint, invocation_id)
            return
        holders = self.draw(dep, invocation_id)
        self.contexts[invocation_id] = InvocationContext(
            invocation_id, inv.model_id, "B", inv.consumer, invocation_seed(self.seed, invocation_id), holders
        )
        self.transcripts[invocation_id] = Transcript(x, reply_to, holders)
        self._dispatch(invocation_id, 1, x)

    def _dispatch(self, invocation_id: str, index: int, x: tuple[float, ...]) -> None:
        ctx = self.contexts[invocation_id]
        target = self.market.registry.lookup(self.vid, ctx.holders[index])
        self.transport.send(
            self.endpoint, target.endpoint, STEP_INPUT,
            invocation_id=invocation_id, model_id=ctx.model_id, index=index, input=x,
        )

    def _advance(self, invocation_id: str, index: int, out: tuple[float, ...]) -> None:
        tr = self.transcripts.get(invocation_id)
        if tr is None or index in tr.steps:
            return
        ctx = self.contexts[invocation_id]
        recorded = self.ledger.steps(invocation_id).get(index)
        if recorded is None or recorded[1].output_hash != hash_value(out):
            log.info("%s: step %d of %s does not match the ledger", self.endpoint, index, invocation_id)
            return
        d = tr.input if index == 1 else tr.steps[index - 1][1]
        tr.steps[index] = (d, out)
        n = len(self.ledger.deployment(ctx.model_id)[1].holders)
        if index < n:
            self._dispatch(invocation_id, index + 1, out)
            return
        tr.output = out
        self.append(FinalOutputHashed(invocation_id, hash_value(out)))
        self.transport.send(self.endpoint, tr.reply_to, FINAL_OUTPUT, invocation_id=invocation_id, output=out)
