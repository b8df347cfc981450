import itertools
import random

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from apimarket import families
from apimarket.market import Marketplace
from apimarket.model_ir import evaluate, hash_component
from apimarket.participants import Denied, IdentityRegistry
from apimarket.partitioner import STRATEGIES, NotPartitionable, PlacementInfeasible
from apimarket.protocol import Timeout

from helpers import model_for, world


def test_vendors_never_resolve_each_other():
    market = Marketplace(3)
    provider = market.add_provider("p")
    orch = market.add_orchestrator("o")
    vendors = [market.add_vendor(f"v{i}") for i in range(5)]
    reg = market.registry
    for a, b in itertools.permutations(vendors, 2):
        with pytest.raises(Denied):
            reg.grant(a.vid, b.vid)
        with pytest.raises(Denied):
            reg.lookup(a.vid, b.vid)
    for v in vendors:
        reg.grant(provider.vid, v.vid)
        assert reg.lookup(provider.vid, v.vid).endpoint == v.endpoint
        assert reg.lookup(v.vid, orch.vid).role == "orchestrator"
        assert reg.lookup(v.vid, v.vid).endpoint == v.endpoint
    assert len(reg.denials) == 20


def test_deployment_grants_only_what_is_needed():
    g = model_for("pipeline", 2)
    market, provider, vs, consumer, orch, plan = world(g, "pipeline", "B", vendors=4, n=3)
    reg = market.registry
    for v in vs:
        assert reg.visible(orch.vid, v.vid)
        assert reg.visible(provider.vid, v.vid)
        assert not reg.visible(consumer.vid, v.vid)
        for w in vs:
            if w is not v:
                assert not reg.visible(v.vid, w.vid)


def test_registry_rejects_unknown_role_and_duplicates():
    reg = IdentityRegistry(b"salt")
    with pytest.raises(ValueError):
        reg.register("x://a", "auditor")
    reg.register("vendor://a", "vendor")
    with pytest.raises(ValueError):
        reg.register("vendor://a", "vendor")


def test_deploy_record_and_delivery():
    g = model_for("layers", 4)
    market, provider, vs, consumer, orch, plan = world(g, "layers", "A", vendors=4, n=3)
    seq, dep = market.ledger.deployment("m")
    assert seq == 0
    assert market.ledger[0].author == provider.vid
    assert dep.signature == plan.signature.root
    assert dep.sequence == tuple(v.vid for v in vs[:3])
    for i, v in enumerate(vs[:3], start=1):
        held = v.holdings("m")
        assert set(held) == {i}
        assert hash_component(held[i]) == dep.component_leaf_hashes[i - 1]
    assert vs[3].holdings("m") == {}


@pytest.mark.parametrize("k,r,n", [(3, 2, 4), (4, 2, 5), (5, 3, 6), (3, 2, 3)])
def test_overlapping_holders_are_strict_subsets(k, r, n):
    g = families.random_chain(k + 1, 2, random.Random(k), "m")
    market, provider, vs, consumer, orch, plan = world(g, "pipeline", "B", vendors=n, n=k, replication=r)
    _, dep = market.ledger.deployment("m")
    everyone = {v.vid for v in vs}
    for v in vs:
        held = set(v.holdings("m"))
        assert held < set(range(1, k + 1))
    for i, holders in enumerate(dep.holders, start=1):
        assert len(holders) == r and set(holders) <= everyone
        for h in holders:
            assert i in market.actor(h).holdings("m")


def test_joint_deployment_has_one_signature():
    rng = random.Random(8)
    part1 = families.random_chain(3, 2, rng, "front")
    part2 = families.random_chain(3, 2, rng, "back")
    market = Marketplace(1)
    p1, p2 = market.add_provider("alice"), market.add_provider("bob")
    vs = [market.add_vendor(f"v{i}") for i in range(4)]
    consumer = market.add_consumer("c")
    plan = market.deploy_joint([p1, p2], [part1, part2], "joint", vs, "A", [2, 2])
    deps = market.ledger.deployments()
    assert len(deps) == 1
    _, dep = deps[0]
    assert dep.providers == (p1.vid, p2.vid)
    assert dep.num_components == 4 and dep.signature == plan.signature.root
    assert [market.escrow.depositor("joint", i) for i in range(1, 5)] == [p1.vid, p1.vid, p2.vid, p2.vid]
    x = (0.2, -0.4)
    assert consumer.invoke("joint", x) == evaluate(part2, evaluate(part1, x))


def test_first_vendor_reacts_to_invocation_record():
    g = model_for("pipeline", 5)
    market, provider, vs, consumer, orch, plan = world(g, "pipeline", "A", vendors=3, n=3)
    x = [0.1] * g.input_arity
    consumer.invoke("m", x)
    logs = [[(s.invocation_id, s.step_index) for s in v.execution_log] for v in vs]
    assert logs == [[("m#1", 1)], [("m#1", 2)], [("m#1", 3)]]


@pytest.mark.parametrize("protocol", "AB")
def test_skipping_vendor_times_out_at_its_step(protocol):
    g = model_for("pipeline", 6)
    market, provider, vs, consumer, orch, plan = world(g, "pipeline", protocol, vendors=5, n=3)
    _, dep = market.ledger.deployment("m")
    if protocol == "A":
        skipper = dep.sequence[1]
    else:
        route = orch.draw(dep, market.peek_invocation_id("m"))
        assert route[1] != route[2]
        skipper = route[2]
    market.actor(skipper).behavior = "skip"
    with pytest.raises(Timeout) as exc:
        consumer.invoke("m", [0.3] * g.input_arity)
    assert exc.value.step == 2
    assert len(market.ledger.steps("m#1")) == 1
    assert market.ledger.final("m#1") is None


@pytest.mark.parametrize("strategy", STRATEGIES)
@pytest.mark.parametrize("protocol", "AB")
def test_honest_execution_matches_direct_evaluation(strategy, protocol):
    for seed in range(5):
        g = model_for(strategy, seed)
        market, provider, vs, consumer, orch, plan = world(g, strategy, protocol, vendors=4, n=3, seed=seed)
        for j in range(3):
            x = [((seed + j) % 5 - 2) / 3.0 + 0.1 * i for i in range(g.input_arity)]
            assert consumer.invoke("m", x) == evaluate(g, x)
        assert market.ledger.usage_count("m") == 3
        assert market.ledger.verify_chain() is None


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(STRATEGIES), st.sampled_from("AB"), st.integers(0, 10_000), st.integers(2, 4))
def test_fidelity_property(strategy, protocol, seed, n):
    g = model_for(strategy, seed)
    try:
        market, provider, vs, consumer, orch, plan = world(g, strategy, protocol, vendors=n + 2, n=n, seed=seed)
    except (NotPartitionable, PlacementInfeasible):
        # too small a model for n parts, or a lone part nobody may hold whole
        assume(False)
    x = [0.25 * (i + 1) - 0.6 for i in range(g.input_arity)]
    assert consumer.invoke("m", x) == evaluate(g, x)


def test_usage_reports():
    g = model_for("pipeline", 1)
    market, provider, vs, consumer, orch, plan = world(g, "pipeline", "A", vendors=3, vendor2="underreport")
    for j in range(6):
        consumer.invoke("m", [0.1 * j] * g.input_arity)
    assert [v.report_usage("m") for v in vs] == [6, 3, 6]
