"""Append-only hash-chained ledger with contract-style validation.

The ledger is the single shared record of the marketplace. Every append is
checked against the execution rules before it is written; rejected records
never reach the chain. Envelopes link to their predecessor by hash and can be
exported to / re-imported from JSON lines.
"""

from __future__ import annotations

import json
import threading
from collections import defaultdict, deque
from dataclasses import dataclass, field, fields
from typing import Any, Callable, ClassVar, Iterable, Iterator

from .encoding import ZERO_HASH, encode, float_to_text, sha256, text_to_float
from .partitioner import merkle_root

# reason codes returned by Ledger.validate
UNKNOWN_MODEL = "unknown model"
DUPLICATE_MODEL = "duplicate model"
MALFORMED_DEPLOYMENT = "malformed deployment"
SIGNATURE_MISMATCH = "signature mismatch"
UNKNOWN_INVOCATION = "unknown invocation"
DUPLICATE_INVOCATION = "duplicate invocation"
PROTOCOL_MISMATCH = "protocol mismatch"
STEP_OUT_OF_RANGE = "step out of range"
OUT_OF_ORDER = "out-of-order step"
DUPLICATE_STEP = "duplicate step"
WRONG_AUTHOR = "wrong author"
UNKNOWN_COMPONENT = "unknown component hash"
WRONG_COMPONENT = "wrong component hash"
INPUT_MISMATCH = "input mismatch"
INCOMPLETE_EXECUTION = "incomplete execution"
DUPLICATE_FINAL = "duplicate final output"
OUTPUT_MISMATCH = "output mismatch"
UNKNOWN_DISPUTE = "unknown dispute"
DUPLICATE_DISPUTE = "duplicate dispute"


class VirtualId(bytes):
    """32-byte pseudonymous on-ledger identity."""

    def __new__(cls, raw: bytes):
        if len(raw) != 32:
            raise ValueError("virtual ids are 32 bytes")
        return super().__new__(cls, raw)

    @classmethod
    def derive(cls, off_chain: str, salt: bytes) -> VirtualId:
        return cls(sha256(b"virtual-id\x00" + salt + b"\x00" + off_chain.encode("utf-8")))

    @property
    def short(self) -> str:
        return self.hex()[:8]

    def __repr__(self) -> str:
        return f"VirtualId({self.short})"


class ValidationRejected(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.detail = detail


# -- records ---------------------------------------------------------------------------


def _f(kind: str, default: Any = None, optional: bool = False):
    if optional:
        return field(default=default, metadata={"t": kind})
    return field(metadata={"t": kind})


@dataclass(frozen=True)
class Record:
    KIND: ClassVar[str] = ""

    def as_tuple(self) -> tuple:
        return (self.KIND,) + tuple(getattr(self, f.name) for f in fields(self))

    def to_json(self) -> dict:
        out: dict[str, Any] = {"kind": self.KIND}
        for f in fields(self):
            out[f.name] = _to_json(f.metadata["t"], getattr(self, f.name))
        return out

    @property
    def model_ref(self) -> str | None:
        return getattr(self, "model_id", None)

    @property
    def invocation_ref(self) -> str | None:
        return getattr(self, "invocation_id", None)


@dataclass(frozen=True)
class ModelDeployment(Record):
    KIND: ClassVar[str] = "ModelDeployment"
    model_id: str = _f("str")
    signature: bytes = _f("hash")
    sequence: tuple[VirtualId, ...] = _f("vids")
    component_leaf_hashes: tuple[bytes, ...] = _f("hashes")
    num_components: int = _f("int")
    protocol: str = _f("str", "A", True)
    holders: tuple[tuple[VirtualId, ...], ...] = _f("holders", (), True)
    providers: tuple[VirtualId, ...] = _f("vids", (), True)
    orchestrator: VirtualId | None = _f("opt_vid", None, True)


@dataclass(frozen=True)
class ApiInvocation(Record):
    KIND: ClassVar[str] = "ApiInvocation"
    invocation_id: str = _f("str")
    model_id: str = _f("str")
    consumer: VirtualId = _f("vid")
    input: tuple[float, ...] | None = _f("opt_value", None, True)
    input_hash: bytes | None = _f("opt_hash", None, True)


@dataclass(frozen=True)
class ExecutionStep(Record):
    KIND: ClassVar[str] = "ExecutionStep"
    invocation_id: str = _f("str")
    step_index: int = _f("int")
    input: tuple[float, ...] = _f("value")
    output: tuple[float, ...] = _f("value")
    component_hash: bytes = _f("hash")
    vendor: VirtualId = _f("vid")


@dataclass(frozen=True)
class ExecutionStepHashed(Record):
    KIND: ClassVar[str] = "ExecutionStepHashed"
    invocation_id: str = _f("str")
    step_index: int = _f("int")
    input_hash: bytes = _f("hash")
    output_hash: bytes = _f("hash")
    component_hash: bytes = _f("hash")
    vendor: VirtualId = _f("vid")


@dataclass(frozen=True)
class FinalOutput(Record):
    KIND: ClassVar[str] = "FinalOutput"
    invocation_id: str = _f("str")
    output: tuple[float, ...] = _f("value")


@dataclass(frozen=True)
class FinalOutputHashed(Record):
    KIND: ClassVar[str] = "FinalOutputHashed"
    invocation_id: str = _f("str")
    output_hash: bytes = _f("hash")


@dataclass(frozen=True)
class DisputeOpened(Record):
    KIND: ClassVar[str] = "DisputeOpened"
    dispute_id: str = _f("str")
    claimant: VirtualId = _f("vid")
    claim_kind: str = _f("str")
    invocation_id: str | None = _f("opt_str", None, True)
    model_id: str | None = _f("opt_str", None, True)


@dataclass(frozen=True)
class DisputeVerdict(Record):
    KIND: ClassVar[str] = "DisputeVerdict"
    dispute_id: str = _f("str")
    outcome: str = _f("str")
    culpable: VirtualId | None = _f("opt_vid", None, True)
    reason: str = _f("str", "", True)
    invocation_id: str | None = _f("opt_str", None, True)
    model_id: str | None = _f("opt_str", None, True)


RECORD_TYPES: dict[str, type[Record]] = {
    cls.KIND: cls
    for cls in (
        ModelDeployment,
        ApiInvocation,
        ExecutionStep,
        ExecutionStepHashed,
        FinalOutput,
        FinalOutputHashed,
        DisputeOpened,
        DisputeVerdict,
    )
}


def _to_json(kind: str, v: Any) -> Any:
    if v is None:
        return None
    if kind in ("str", "int", "opt_str"):
        return v
    if kind in ("hash", "vid", "opt_hash", "opt_vid"):
        return v.hex()
    if kind in ("vids", "hashes"):
        return [x.hex() for x in v]
    if kind == "holders":
        return [[x.hex() for x in hs] for hs in v]
    if kind in ("value", "opt_value"):
        return [float_to_text(x) for x in v]
    raise ValueError(kind)  # pragma: no cover


def _from_json(kind: str, v: Any) -> Any:
    if v is None:
        return None
    if kind == "str" or kind == "opt_str":
        return str(v)
    if kind == "int":
        return int(v)
    if kind in ("hash", "opt_hash"):
        return bytes.fromhex(v)
    if kind in ("vid", "opt_vid"):
        return VirtualId(bytes.fromhex(v))
    if kind == "vids":
        return tuple(VirtualId(bytes.fromhex(x)) for x in v)
    if kind == "hashes":
        return tuple(bytes.fromhex(x) for x in v)
    if kind == "holders":
        return tuple(tuple(VirtualId(bytes.fromhex(x)) for x in hs) for hs in v)
    if kind in ("value", "opt_value"):
        return tuple(text_to_float(x) for x in v)
    raise ValueError(kind)  # pragma: no cover


def record_from_json(doc: dict) -> Record:
    cls = RECORD_TYPES[doc["kind"]]
    kwargs = {f.name: _from_json(f.metadata["t"], doc.get(f.name)) for f in fields(cls) if f.name in doc}
    return cls(**kwargs)


# -- envelopes ---------------------------------------------------------------------------


def envelope_hash(seq: int, prev_hash: bytes, author: bytes, payload: Record) -> bytes:
    return sha256(encode(("Envelope", seq, prev_hash, author, payload.as_tuple())))


@dataclass(frozen=True)
class RecordEnvelope:
    seq: int
    prev_hash: bytes
    author: VirtualId
    payload: Record
    record_hash: bytes

    def recompute(self) -> bytes:
        return envelope_hash(self.seq, self.prev_hash, self.author, self.payload)

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "prev_hash": self.prev_hash.hex(),
            "author": self.author.hex(),
            "payload": self.payload.to_json(),
            "record_hash": self.record_hash.hex(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> RecordEnvelope:
        return cls(
            int(doc["seq"]),
            bytes.fromhex(doc["prev_hash"]),
            VirtualId(bytes.fromhex(doc["author"])),
            record_from_json(doc["payload"]),
            bytes.fromhex(doc["record_hash"]),
        )


class Subscription:
    """Queue of envelopes whose payload matched ``predicate`` at append time."""

    def __init__(self, predicate: Callable[[Record], bool]):
        self.predicate = predicate
        self._queue: deque[RecordEnvelope] = deque()
        self.delivered = 0

    def _offer(self, env: RecordEnvelope) -> None:
        if self.predicate(env.payload):
            self._queue.append(env)
            self.delivered += 1

    def poll(self) -> list[RecordEnvelope]:
        out = []
        while self._queue:
            out.append(self._queue.popleft())
        return out

    def pending(self) -> bool:
        return bool(self._queue)

    def __iter__(self) -> Iterator[RecordEnvelope]:
        return iter(self.poll())


class Ledger:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._envelopes: list[RecordEnvelope] = []
        self._subs: list[Subscription] = []
        self._anchor: tuple[int, bytes] | None = (0, ZERO_HASH)
        self._reset_index()

    def _reset_index(self) -> None:
        self._deployments: dict[str, int] = {}
        self._invocations: dict[str, int] = {}
        self._steps: dict[str, dict[int, int]] = defaultdict(dict)
        self._finals: dict[str, int] = {}
        self._disputes: dict[str, int] = {}
        self._by_invocation: dict[str, list[int]] = defaultdict(list)
        self._by_model: dict[str, list[int]] = defaultdict(list)
        self._usage: dict[str, int] = defaultdict(int)

    # -- construction from existing envelopes ----------------------------------------

    @classmethod
    def from_envelopes(cls, envelopes: Iterable[RecordEnvelope], anchor: tuple[int, bytes] | None = None) -> Ledger:
        """Adopt envelopes verbatim (no validation), e.g. from a file or a test mutation.

        ``anchor`` is an externally held ``(count, head_hash)`` commitment; without
        it, truncation at the tail cannot be detected.
        """
        led = cls()
        led._anchor = anchor
        for env in envelopes:
            led._envelopes.append(env)
            led._index(len(led._envelopes) - 1, env.payload)
        return led

    @property
    def envelopes(self) -> tuple[RecordEnvelope, ...]:
        return tuple(self._envelopes)

    def __len__(self) -> int:
        return len(self._envelopes)

    def __getitem__(self, seq: int) -> RecordEnvelope:
        return self._envelopes[seq]

    @property
    def head(self) -> tuple[int, bytes]:
        with self._lock:
            if not self._envelopes:
                return (0, ZERO_HASH)
            return (len(self._envelopes), self._envelopes[-1].record_hash)

    # -- lookups ---------------------------------------------------------------------

    def deployment(self, model_id: str) -> tuple[int, ModelDeployment] | None:
        seq = self._deployments.get(model_id)
        return None if seq is None else (seq, self._envelopes[seq].payload)

    def deployments(self) -> list[tuple[int, ModelDeployment]]:
        return [(s, self._envelopes[s].payload) for s in sorted(self._deployments.values())]

    def invocation(self, invocation_id: str) -> tuple[int, ApiInvocation] | None:
        seq = self._invocations.get(invocation_id)
        return None if seq is None else (seq, self._envelopes[seq].payload)

    def steps(self, invocation_id: str) -> dict[int, tuple[int, Record]]:
        return {i: (s, self._envelopes[s].payload) for i, s in sorted(self._steps.get(invocation_id, {}).items())}

    def final(self, invocation_id: str) -> tuple[int, Record] | None:
        seq = self._finals.get(invocation_id)
        return None if seq is None else (seq, self._envelopes[seq].payload)

    def model_of(self, record: Record) -> str | None:
        if record.model_ref is not None:
            return record.model_ref
        inv = record.invocation_ref
        if inv is not None and inv in self._invocations:
            return self._envelopes[self._invocations[inv]].payload.model_id
        return None

    def query_by_invocation(self, invocation_id: str) -> list[RecordEnvelope]:
        return [self._envelopes[s] for s in self._by_invocation.get(invocation_id, [])]

    def query_by_model(self, model_id: str) -> list[RecordEnvelope]:
        return [self._envelopes[s] for s in self._by_model.get(model_id, [])]

    def usage_count(self, model_id: str) -> int:
        return self._usage.get(model_id, 0)

    def invocation_ids(self, model_id: str | None = None) -> list[str]:
        out = sorted(self._invocations, key=self._invocations.get)
        if model_id is None:
            return out
        return [i for i in out if self._envelopes[self._invocations[i]].payload.model_id == model_id]

    # -- validation ------------------------------------------------------------------

    def validate(self, payload: Record, author: bytes | None = None) -> str | None:
        """Return ``None`` if ``payload`` may be appended, else a reason code."""
        with self._lock:
            check = getattr(self, f"_check_{payload.KIND}")
            return check(payload, author)

    def _check_ModelDeployment(self, p: ModelDeployment, author) -> str | None:
        if p.model_id in self._deployments:
            return DUPLICATE_MODEL
        n = p.num_components
        if n < 1 or len(p.component_leaf_hashes) != n or p.protocol not in ("A", "B") or not p.providers:
            return MALFORMED_DEPLOYMENT
        if p.protocol == "A" and (len(p.sequence) != n or len(set(p.sequence)) != n):
            return MALFORMED_DEPLOYMENT
        if p.protocol == "B" and (len(p.holders) != n or not all(p.holders) or p.orchestrator is None):
            return MALFORMED_DEPLOYMENT
        if merkle_root(p.component_leaf_hashes) != p.signature:
            return SIGNATURE_MISMATCH
        if author is not None and author not in p.providers:
            return WRONG_AUTHOR
        return None

    def _check_ApiInvocation(self, p: ApiInvocation, author) -> str | None:
        dep = self.deployment(p.model_id)
        if dep is None:
            return UNKNOWN_MODEL
        if p.invocation_id in self._invocations:
            return DUPLICATE_INVOCATION
        if dep[1].protocol == "A" and (p.input is None or p.input_hash is not None):
            return PROTOCOL_MISMATCH
        if dep[1].protocol == "B" and (p.input is not None or p.input_hash is None):
            return PROTOCOL_MISMATCH
        if author is not None and author != p.consumer:
            return WRONG_AUTHOR
        return None

    def _context(self, invocation_id: str) -> tuple[ApiInvocation, ModelDeployment] | None:
        inv = self.invocation(invocation_id)
        if inv is None:
            return None
        return inv[1], self.deployment(inv[1].model_id)[1]

    def _check_step(self, p, author, protocol: str) -> str | None:
        ctx = self._context(p.invocation_id)
        if ctx is None:
            return UNKNOWN_INVOCATION
        inv, dep = ctx
        if dep.protocol != protocol:
            return PROTOCOL_MISMATCH
        i = p.step_index
        if not 1 <= i <= dep.num_components:
            return STEP_OUT_OF_RANGE
        done = self._steps.get(p.invocation_id, {})
        if i in done:
            return DUPLICATE_STEP
        if any(j not in done for j in range(1, i)):
            return OUT_OF_ORDER
        if author is not None and author != p.vendor:
            return WRONG_AUTHOR
        allowed = (dep.sequence[i - 1],) if protocol == "A" else dep.holders[i - 1]
        if p.vendor not in allowed:
            return WRONG_AUTHOR
        if p.component_hash != dep.component_leaf_hashes[i - 1]:
            return WRONG_COMPONENT if p.component_hash in dep.component_leaf_hashes else UNKNOWN_COMPONENT
        if protocol == "A":
            expected = inv.input if i == 1 else self._envelopes[done[i - 1]].payload.output
            if p.input != expected:
                return INPUT_MISMATCH
        else:
            expected = inv.input_hash if i == 1 else self._envelopes[done[i - 1]].payload.output_hash
            if p.input_hash != expected:
                return INPUT_MISMATCH
        return None

    def _check_ExecutionStep(self, p: ExecutionStep, author) -> str | None:
        return self._check_step(p, author, "A")

    def _check_ExecutionStepHashed(self, p: ExecutionStepHashed, author) -> str | None:
        return self._check_step(p, author, "B")

    def _check_final(self, p, author, protocol: str) -> str | None:
        ctx = self._context(p.invocation_id)
        if ctx is None:
            return UNKNOWN_INVOCATION
        inv, dep = ctx
        if dep.protocol != protocol:
            return PROTOCOL_MISMATCH
        if p.invocation_id in self._finals:
            return DUPLICATE_FINAL
        done = self._steps.get(p.invocation_id, {})
        if len(done) < dep.num_components:
            return INCOMPLETE_EXECUTION
        expected_author = inv.consumer if protocol == "A" else dep.orchestrator
        if author is not None and author != expected_author:
            return WRONG_AUTHOR
        last = self._envelopes[done[dep.num_components]].payload
        if protocol == "A" and p.output != last.output:
            return OUTPUT_MISMATCH
        if protocol == "B" and p.output_hash != last.output_hash:
            return OUTPUT_MISMATCH
        return None

    def _check_FinalOutput(self, p: FinalOutput, author) -> str | None:
        return self._check_final(p, author, "A")

    def _check_FinalOutputHashed(self, p: FinalOutputHashed, author) -> str | None:
        return self._check_final(p, author, "B")

    def _check_subject(self, p) -> str | None:
        if p.invocation_id is None and p.model_id is None:
            return UNKNOWN_INVOCATION
        if p.invocation_id is not None and p.invocation_id not in self._invocations:
            return UNKNOWN_INVOCATION
        if p.model_id is not None and p.model_id not in self._deployments:
            return UNKNOWN_MODEL
        return None

    def _check_DisputeOpened(self, p: DisputeOpened, author) -> str | None:
        if p.dispute_id in self._disputes:
            return DUPLICATE_DISPUTE
        if author is not None and author != p.claimant:
            return WRONG_AUTHOR
        return self._check_subject(p)

    def _check_DisputeVerdict(self, p: DisputeVerdict, author) -> str | None:
        if p.dispute_id not in self._disputes:
            return UNKNOWN_DISPUTE
        return self._check_subject(p)

    # -- mutation ----------------------------------------------------------------------

    def _index(self, seq: int, p: Record) -> None:
        kind = p.KIND
        if kind == "ModelDeployment":
            self._deployments.setdefault(p.model_id, seq)
        elif kind == "ApiInvocation":
            self._invocations.setdefault(p.invocation_id, seq)
            self._usage[p.model_id] += 1
        elif kind in ("ExecutionStep", "ExecutionStepHashed"):
            self._steps[p.invocation_id].setdefault(p.step_index, seq)
        elif kind in ("FinalOutput", "FinalOutputHashed"):
            self._finals.setdefault(p.invocation_id, seq)
        elif kind == "DisputeOpened":
            self._disputes.setdefault(p.dispute_id, seq)
        inv = p.invocation_ref
        if inv is not None:
            self._by_invocation[inv].append(seq)
        model = self.model_of(p)
        if model is not None:
            self._by_model[model].append(seq)

    def append(self, payload: Record, author: bytes) -> int:
        """Validate and append; returns the new sequence number."""
        with self._lock:
            reason = self.validate(payload, author)
            if reason is not None:
                raise ValidationRejected(reason, f"{payload.KIND} by {bytes(author).hex()[:8]}")
            seq = len(self._envelopes)
            prev = self._envelopes[-1].record_hash if self._envelopes else ZERO_HASH
            author = VirtualId(bytes(author))
            env = RecordEnvelope(seq, prev, author, payload, envelope_hash(seq, prev, author, payload))
            self._envelopes.append(env)
            self._index(seq, payload)
            self._anchor = (seq + 1, env.record_hash)
            for sub in list(self._subs):
                sub._offer(env)
            return seq

    def subscribe(self, predicate: Callable[[Record], bool] | None = None) -> Subscription:
        sub = Subscription(predicate or (lambda _p: True))
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    # -- integrity ---------------------------------------------------------------------

    def verify_chain(self) -> int | None:
        """``None`` if intact, else the first sequence position that fails."""
        with self._lock:
            return verify_envelopes(self._envelopes, self._anchor)

    # -- persistence -------------------------------------------------------------------

    def dumps_jsonl(self) -> str:
        with self._lock:
            return "".join(json.dumps(env.to_json(), separators=(",", ":")) + "\n" for env in self._envelopes)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps_jsonl())

    @classmethod
    def loads_jsonl(cls, text: str, anchor: tuple[int, bytes] | None = None) -> Ledger:
        envs = [RecordEnvelope.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls.from_envelopes(envs, anchor)

    @classmethod
    def load(cls, path, anchor: tuple[int, bytes] | None = None) -> Ledger:
        with open(path, encoding="utf-8") as fh:
            return cls.loads_jsonl(fh.read(), anchor)


def verify_envelopes(envelopes: list[RecordEnvelope], anchor: tuple[int, bytes] | None = None) -> int | None:
    prev = ZERO_HASH
    for i, env in enumerate(envelopes):
        if env.seq != i or env.prev_hash != prev or env.recompute() != env.record_hash:
            return i
        prev = env.record_hash
    if anchor is not None:
        count, head = anchor
        if len(envelopes) != count:
            return min(len(envelopes), count)
        if count and prev != head:
            return count - 1
    return None


def model_filter(ledger: Ledger, model_ids: Iterable[str]) -> Callable[[Record], bool]:
    """Predicate matching records about any of ``model_ids`` (checked at append time)."""
    wanted = set(model_ids)

    def match(record: Record) -> bool:
        return ledger.model_of(record) in wanted

    match.models = wanted  # type: ignore[attr-defined]
    return match
