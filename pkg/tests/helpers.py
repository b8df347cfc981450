"""Shared builders for tests: hand-made traces that bypass the actors."""

from __future__ import annotations

import random

from apimarket import families
from apimarket.encoding import hash_value, sha256
from apimarket.ledger import (
    ApiInvocation,
    ExecutionStep,
    ExecutionStepHashed,
    FinalOutput,
    FinalOutputHashed,
    Ledger,
    ModelDeployment,
    VirtualId,
)
from apimarket.model_ir import evaluate
from apimarket.partitioner import partition_pipeline


def vid(name: str) -> VirtualId:
    return VirtualId(sha256(name.encode()))


PROVIDER = vid("provider")
CONSUMER = vid("consumer")
ORCH = vid("orchestrator")


def deployment(n: int, protocol: str = "A", seed: int = 0, model_id: str = "m"):
    """A real n-part pipeline and the deployment record describing it."""
    rng = random.Random(seed)
    g = families.random_chain(n + rng.randint(0, 2), 2, rng, model_id)
    plan = partition_pipeline(g, n)
    vendors = [vid(f"vendor{i}") for i in range(n + 1)]
    if protocol == "A":
        dep = ModelDeployment(
            model_id, plan.signature.root, tuple(vendors[:n]), plan.signature.leaf_hashes, n, "A",
            providers=(PROVIDER,),
        )
    else:
        holders = tuple((vendors[i], vendors[(i + 1) % (n + 1)]) for i in range(n))
        dep = ModelDeployment(
            model_id, plan.signature.root, (), plan.signature.leaf_hashes, n, "B",
            holders=holders, providers=(PROVIDER,), orchestrator=ORCH,
        )
    return g, plan, dep


def honest_records(plan, dep, x, invocation_id: str = "inv-1"):
    """(payload, author) pairs of one honest invocation, in order."""
    out = []
    if dep.protocol == "A":
        out.append((ApiInvocation(invocation_id, dep.model_id, CONSUMER, input=tuple(x)), CONSUMER))
    else:
        out.append((ApiInvocation(invocation_id, dep.model_id, CONSUMER, input_hash=hash_value(x)), CONSUMER))
    d = tuple(x)
    for i, comp in enumerate(plan.components, start=1):
        o = evaluate(comp.fragment, d)
        if dep.protocol == "A":
            v = dep.sequence[i - 1]
            out.append((ExecutionStep(invocation_id, i, d, o, comp.component_hash, v), v))
        else:
            v = dep.holders[i - 1][0]
            out.append((ExecutionStepHashed(invocation_id, i, hash_value(d), hash_value(o), comp.component_hash, v), v))
        d = o
    if dep.protocol == "A":
        out.append((FinalOutput(invocation_id, d), CONSUMER))
    else:
        out.append((FinalOutputHashed(invocation_id, hash_value(d)), ORCH))
    return out


def populated_ledger(n: int = 3, protocol: str = "A", invocations: int = 2, seed: int = 0) -> Ledger:
    g, plan, dep = deployment(n, protocol, seed)
    led = Ledger()
    led.append(dep, PROVIDER)
    rng = random.Random(seed)
    for j in range(invocations):
        x = [rng.uniform(-1, 1) for _ in range(g.input_arity)]
        for payload, author in honest_records(plan, dep, x, f"inv-{j}"):
            led.append(payload, author)
    return led


def model_for(strategy: str, seed: int = 0, model_id: str = "m"):
    """A random model of the family each partitioning strategy is made for."""
    rng = random.Random(seed)
    if strategy == "pipeline":
        return families.random_chain(rng.randint(3, 6), rng.randint(1, 3), rng, model_id)
    if strategy == "layers":
        return families.mlp([rng.randint(2, 4), rng.randint(3, 6), rng.randint(2, 5), rng.randint(1, 3)], rng, model_id)
    if strategy == "tree":
        return families.decision_tree(rng.randint(2, 4), rng.randint(2, 4), rng, model_id)
    if strategy == "ensemble":
        return families.ensemble(rng.randint(3, 6), rng.randint(2, 4), rng, model_id)
    raise ValueError(strategy)


def world(model, strategy="pipeline", protocol="A", vendors=3, n=None, replication=2, seed=0, tap=None, **behaviors):
    """A marketplace with one provider, one consumer and ``model`` deployed.

    ``behaviors`` maps vendor names (``vendor1``...) to dishonest modes.
    """
    from apimarket.market import Marketplace

    market = Marketplace(seed, tap=tap)
    provider = market.add_provider("provider")
    vs = [market.add_vendor(f"vendor{i + 1}", behaviors.get(f"vendor{i + 1}")) for i in range(vendors)]
    consumer = market.add_consumer("consumer1")
    orch = market.add_orchestrator("orchestrator") if protocol == "B" else None
    plan = market.deploy(provider, model, strategy, vs, protocol, n or min(vendors, 3), replication, orch)
    return market, provider, vs, consumer, orch, plan
