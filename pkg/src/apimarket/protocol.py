"""The two end-to-end execution protocols.

Protocol A runs the declared vendor sequence with every intermediate value
in the clear on the ledger. Protocol B routes data off-chain through an
orchestrator that picks one holder per component at random; only hashes of
inputs and outputs reach the ledger.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .encoding import as_value, hash_value
from .ledger import ApiInvocation, FinalOutput, VirtualId
from .transport import INVOKE


class ProtocolError(Exception):
    pass


class Timeout(ProtocolError):
    """Execution stalled; ``step`` is the first step index never recorded."""

    def __init__(self, step: int, invocation_id: str):
        super().__init__(f"{invocation_id}: step {step} was never executed")
        self.step = step
        self.invocation_id = invocation_id


class HashMismatch(ProtocolError):
    def __init__(self, invocation_id: str, expected: bytes | None, actual: bytes):
        shown = expected.hex() if expected else "nothing"
        super().__init__(f"{invocation_id}: received output hashes to {actual.hex()}, ledger holds {shown}")
        self.invocation_id = invocation_id
        self.expected = expected
        self.actual = actual


@dataclass
class InvocationContext:
    invocation_id: str
    model_id: str
    protocol: str
    consumer: VirtualId
    seed: int | None = None
    holders: dict[int, VirtualId] = field(default_factory=dict)

    @property
    def vendors(self) -> list[VirtualId]:
        """Distinct vendors involved, in execution order."""
        return list(dict.fromkeys(self.holders[i] for i in sorted(self.holders)))


def choose_subset(placement: Mapping[int, Sequence[VirtualId]], rng: random.Random) -> dict[int, VirtualId]:
    """Pick one holder per component, uniformly and independently."""
    chosen = {}
    for index in sorted(placement):
        holders = placement[index]
        if not holders:
            raise ValueError(f"component {index} has no holder")
        chosen[index] = holders[rng.randrange(len(holders))]
    return chosen


def _first_missing(ledger, invocation_id: str, n: int) -> int:
    done = ledger.steps(invocation_id)
    return next((i for i in range(1, n + 1) if i not in done), n + 1)


def run_protocol_a(market, context: InvocationContext, x: Sequence[float]) -> tuple[float, ...]:
    ledger = market.ledger
    x = as_value(x)
    _, dep = ledger.deployment(context.model_id)
    n = dep.num_components
    context.holders = {i + 1: v for i, v in enumerate(dep.sequence)}
    ledger.append(ApiInvocation(context.invocation_id, context.model_id, context.consumer, input=x), context.consumer)

    def finished() -> bool:
        return len(ledger.steps(context.invocation_id)) == n

    if not market.run_until(finished, market.step_budget * (n + 1)):
        raise Timeout(_first_missing(ledger, context.invocation_id, n), context.invocation_id)
    _, last = ledger.steps(context.invocation_id)[n]
    ledger.append(FinalOutput(context.invocation_id, last.output), context.consumer)
    return last.output


def run_protocol_b(market, context: InvocationContext, x: Sequence[float]) -> tuple[float, ...]:
    ledger = market.ledger
    x = as_value(x)
    _, dep = ledger.deployment(context.model_id)
    n = dep.num_components
    consumer = market.actor(context.consumer)
    # commit to the input before revealing it to anyone
    ledger.append(
        ApiInvocation(context.invocation_id, context.model_id, context.consumer, input_hash=hash_value(x)),
        context.consumer,
    )
    orchestrator = market.registry.lookup(context.consumer, dep.orchestrator)
    market.transport.send(
        consumer.endpoint,
        orchestrator.endpoint,
        INVOKE,
        invocation_id=context.invocation_id,
        model_id=context.model_id,
        input=x,
    )

    def finished() -> bool:
        return context.invocation_id in consumer.received

    if not market.run_until(finished, market.step_budget * (n + 1)):
        raise Timeout(_first_missing(ledger, context.invocation_id, n), context.invocation_id)
    out = consumer.received[context.invocation_id]
    final = ledger.final(context.invocation_id)
    expected = final[1].output_hash if final else None
    if expected != hash_value(out):
        raise HashMismatch(context.invocation_id, expected, hash_value(out))
    orch = market.actor(dep.orchestrator)
    context.holders = dict(orch.contexts[context.invocation_id].holders)
    return out
