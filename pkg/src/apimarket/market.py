"""The simulated marketplace: shared ledger, transport, registry and a tick scheduler."""

from __future__ import annotations

import random
from typing import Callable, Sequence

from .audit import Escrow
from .encoding import as_value, sha256
from .ledger import Ledger, VirtualId
from .model_ir import ModelGraph
from .participants import Actor, Consumer, IdentityRegistry, Orchestrator, Provider, Vendor, deploy_plan
from .partitioner import PartitionPlan, partition
from .protocol import InvocationContext, run_protocol_a, run_protocol_b
from .transport import Transport, TransportMessage


class Marketplace:
    """Deterministic single-threaded world.

    Each :meth:`tick` advances the transport clock and lets every actor, in
    registration order, drain its messages and ledger notifications. With the
    same seed and the same sequence of calls the resulting ledger is
    byte-identical.
    """

    def __init__(
        self,
        seed: int = 0,
        step_budget: int = 100,
        tap: Callable[[TransportMessage], None] | None = None,
    ):
        self.seed = seed
        self.step_budget = step_budget
        self.rng = random.Random(seed)
        self.ledger = Ledger()
        self.transport = Transport(tap)
        self.registry = IdentityRegistry(sha256(f"apimarket:{seed}".encode()))
        self.escrow = Escrow()
        self.actors: list[Actor] = []
        self._by_vid: dict[VirtualId, Actor] = {}
        self.contexts: dict[str, InvocationContext] = {}
        self._counter = 0

    def _add(self, actor: Actor) -> Actor:
        self.actors.append(actor)
        self._by_vid[actor.vid] = actor
        return actor

    def _child_rng(self, label: str) -> random.Random:
        return random.Random(int.from_bytes(sha256(f"{self.seed}:{label}".encode())[:8], "big"))

    def add_provider(self, name: str, behavior: str | None = None) -> Provider:
        return self._add(Provider(self, name, behavior, self._child_rng(f"provider:{name}")))

    def add_vendor(self, name: str, behavior: str | None = None) -> Vendor:
        return self._add(Vendor(self, name, behavior, self._child_rng(f"vendor:{name}")))

    def add_consumer(self, name: str) -> Consumer:
        return self._add(Consumer(self, name))

    def add_orchestrator(self, name: str) -> Orchestrator:
        return self._add(Orchestrator(self, name, self.seed))

    def actor(self, vid: bytes) -> Actor:
        return self._by_vid[VirtualId(bytes(vid))]

    def of_role(self, cls: type) -> list:
        return [a for a in self.actors if isinstance(a, cls)]

    # -- scheduling ---------------------------------------------------------------------

    def tick(self) -> None:
        self.transport.advance()
        for actor in self.actors:
            actor.poll()

    def quiescent(self) -> bool:
        return not self.transport.pending() and not any(a.pending() for a in self.actors)

    def run_until(self, done: Callable[[], bool], budget: int) -> bool:
        """Tick until ``done()`` holds; give up after ``budget`` ticks or when nothing can move."""
        for _ in range(budget):
            if done():
                return True
            self.tick()
            if self.quiescent() and not done():
                # one more tick so messages sent during the last one get delivered
                self.tick()
                if self.quiescent():
                    return done()
        return done()

    def settle(self, budget: int = 1000) -> None:
        self.run_until(self.quiescent, budget)

    # -- operations -----------------------------------------------------------------------

    def deploy(
        self,
        provider: Provider,
        model: ModelGraph,
        strategy: str,
        vendors: Sequence[Vendor],
        protocol: str = "A",
        n: int | None = None,
        replication: int | None = None,
        orchestrator: Orchestrator | None = None,
        **kwargs,
    ) -> PartitionPlan:
        plan = provider.deploy(
            model, strategy, [v.vid for v in vendors], protocol, n, replication,
            None if orchestrator is None else orchestrator.vid, **kwargs,
        )
        self.settle()
        return plan

    def deploy_joint(
        self,
        providers: Sequence[Provider],
        parts: Sequence[ModelGraph],
        model_id: str,
        vendors: Sequence[Vendor],
        protocol: str = "A",
        components_per_part: Sequence[int] | None = None,
        strategy: str = "pipeline",
        replication: int | None = None,
        orchestrator: Orchestrator | None = None,
    ) -> PartitionPlan:
        """Several providers offer one API; part ``j`` feeds part ``j + 1``."""
        counts = components_per_part or [1] * len(parts)
        plans = [partition(g, strategy, c) for g, c in zip(parts, counts)]
        plan = deploy_plan(
            self, list(providers), plans, [v.vid for v in vendors], protocol.upper(), replication,
            None if orchestrator is None else orchestrator.vid, model_id,
        )
        self.settle()
        return plan

    def peek_invocation_id(self, model_id: str) -> str:
        return f"{model_id}#{self._counter + 1}"

    def next_invocation_id(self, model_id: str) -> str:
        inv_id = self.peek_invocation_id(model_id)
        self._counter += 1
        return inv_id

    def invoke(self, consumer: Consumer, model_id: str, x: Sequence[float]) -> tuple[float, ...]:
        found = self.ledger.deployment(model_id)
        if found is None:
            raise KeyError(f"model {model_id!r} is not deployed")
        dep = found[1]
        inv_id = self.next_invocation_id(model_id)
        ctx = InvocationContext(inv_id, model_id, dep.protocol, consumer.vid)
        self.contexts[inv_id] = ctx
        consumer.inputs[inv_id] = as_value(x)
        try:
            if dep.protocol == "A":
                return run_protocol_a(self, ctx, x)
            return run_protocol_b(self, ctx, x)
        finally:
            self.settle()
