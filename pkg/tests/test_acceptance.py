"""Acceptance gate. Each test carries the criterion it demonstrates; the
terminal summary prints one PASS/FAIL line per criterion."""

import dataclasses
import hashlib
import itertools
import json
import os
import random
import struct
import subprocess
import sys
import time
from pathlib import Path

import pytest

from apimarket import families
from apimarket.audit import ALL_HONEST, CATALOG, CULPABLE, MissingFragments, inject_adversary, pool_fragments, usage_audit
from apimarket.encoding import ZERO_HASH, encode, hash_value
from apimarket import ledger as L
from apimarket.ledger import Ledger, RecordEnvelope
from apimarket.market import Marketplace
from apimarket.model_ir import evaluate, flip_bit, hash_component
from apimarket.partitioner import (
    NotPartitionable,
    PlacementInfeasible,
    merkle_root,
    partition,
)
from apimarket.runner import run_scenario
from apimarket.scenario import Scenario, load_scenario
from apimarket.transport import FINAL_OUTPUT, INVOKE, STEP_INPUT, STEP_OUTPUT

from helpers import CONSUMER, PROVIDER, deployment, honest_records, model_for, vid, world

ROOT = Path(__file__).resolve().parent.parent
STRATEGIES = ("pipeline", "layers", "tree", "ensemble")
_START = time.perf_counter()


def bits(v):
    return b"".join(struct.pack(">d", x) for x in v)


def random_model(strategy, rng, model_id="m"):
    if strategy == "pipeline":
        if rng.random() < 0.5:
            return families.credit_formula(rng.randint(2, 5), rng.randint(2, 5), rng, model_id)
        return families.random_chain(rng.randint(2, 7), rng.randint(1, 4), rng, model_id)
    if strategy == "layers":
        return families.mlp([rng.randint(1, 5) for _ in range(rng.randint(3, 6))], rng, model_id)
    if strategy == "tree":
        return families.decision_tree(rng.randint(1, 5), rng.randint(1, 4), rng, model_id,
                                      leaf_width=rng.randint(1, 2), p_leaf=rng.choice([0.0, 0.2]))
    return families.ensemble(rng.randint(2, 7), rng.randint(1, 4), rng, model_id,
                             combiner=rng.choice(["average", "weighted"]), weak=rng.choice(["mixed", "linear", "tree", "mlp"]), out_width=rng.randint(1, 2))


def random_plan(strategy, rng, model_id="m"):
    g = random_model(strategy, rng, model_id)
    n = rng.randint(1, 6)
    while True:
        try:
            return g, partition(g, strategy, n)
        except NotPartitionable:
            n -= 1
            if n < 1:
                raise


# -- 1 ----------------------------------------------------------------------------------


@pytest.mark.criterion(1, "partition correctness, 4 strategies x 50 models x 100 inputs, < 60 s")
def test_partition_correctness():
    t0 = time.perf_counter()
    rng = random.Random(1)
    checked = 0
    for strategy in STRATEGIES:
        for m in range(50):
            g, plan = random_plan(strategy, rng)
            frags = plan.fragments()
            for _ in range(100):
                x = [rng.uniform(-4, 4) for _ in range(g.input_arity)]
                routed = x
                for f in frags:
                    routed = evaluate(f, routed)
                assert bits(routed) == bits(evaluate(g, x)), (strategy, m)
                checked += 1
    assert checked == 4 * 50 * 100
    assert time.perf_counter() - t0 < 60


# -- 2 ----------------------------------------------------------------------------------


@pytest.mark.criterion(2, "signature binding, 200 single-bit tamperings, 0 misses")
def test_signature_binding():
    rng = random.Random(2)
    misses = []
    for k in range(200):
        g, plan = random_plan(STRATEGIES[k % 4], rng)
        sig = plan.signature
        i = rng.randrange(plan.n)
        bad = flip_bit(plan.components[i].fragment, rng)
        leaf = hash_component(bad)
        leaves = list(sig.leaf_hashes)
        leaves[i] = leaf
        if leaf == sig.leaf_hashes[i] or merkle_root(leaves) == sig.root:
            misses.append(k)
    assert misses == []


# -- 3 ----------------------------------------------------------------------------------


def chain_oracle(envs, anchor):
    """First bad position, recomputed with hashlib only."""
    prev = ZERO_HASH
    for pos, env in enumerate(envs):
        body = encode(("Envelope", env.seq, env.prev_hash, env.author, env.payload.as_tuple()))
        if env.seq != pos or env.prev_hash != prev or hashlib.sha256(body).digest() != env.record_hash:
            return pos
        prev = env.record_hash
    count, head = anchor
    if len(envs) != count:
        return min(len(envs), count)
    if prev != head:
        return count - 1
    return None


def _touch_payload(payload, rng):
    for f in dataclasses.fields(payload):
        v = getattr(payload, f.name)
        if isinstance(v, str):
            return dataclasses.replace(payload, **{f.name: v + rng.choice("xyz")})
    raise AssertionError(payload)


def mutate(envs, rng):
    envs = list(envs)
    kind = rng.choice(["payload", "author", "prev_hash", "record_hash", "seq", "swap", "delete", "insert", "truncate"])
    i = rng.randrange(len(envs))
    if kind == "payload":
        envs[i] = dataclasses.replace(envs[i], payload=_touch_payload(envs[i].payload, rng))
    elif kind == "author":
        envs[i] = dataclasses.replace(envs[i], author=vid(f"intruder{rng.random()}"))
    elif kind in ("prev_hash", "record_hash"):
        raw = bytearray(getattr(envs[i], kind))
        raw[rng.randrange(32)] ^= 1 << rng.randrange(8)
        envs[i] = dataclasses.replace(envs[i], **{kind: bytes(raw)})
    elif kind == "seq":
        envs[i] = dataclasses.replace(envs[i], seq=envs[i].seq + rng.randint(1, 3))
    elif kind == "swap":
        j = rng.choice([j for j in range(len(envs)) if j != i])
        i, j = min(i, j), max(i, j)
        envs[i], envs[j] = envs[j], envs[i]
    elif kind == "delete":
        del envs[i]
    elif kind == "insert":
        j = rng.choice([j for j in range(len(envs)) if j != i])
        envs.insert(i, envs[j])
    else:
        i = rng.randrange(1, len(envs))
        envs = envs[:i]
    return kind, i, envs


@pytest.mark.criterion(3, "ledger integrity, 200 mutations flagged at the first changed index")
def test_ledger_integrity():
    rng = random.Random(3)
    ledgers = [
        run_scenario(inject_adversary(Scenario(seed=s, protocol=p, vendors=4, invocations=3), b)).market.ledger
        for s, (p, b) in enumerate(itertools.product("ab", sorted(CATALOG)))
    ]
    misses = []
    for k in range(200):
        led = rng.choice(ledgers)
        kind, i, envs = mutate(led.envelopes, rng)
        expected = chain_oracle(envs, led.head)
        assert expected == i, (kind, i, expected)
        got = Ledger.from_envelopes(envs, led.head).verify_chain()
        if got != expected:
            misses.append((k, kind, i, got))
    assert misses == []


# -- 4 ----------------------------------------------------------------------------------


def fuzz_case(rng):
    """(expected reason or None, ledger with a prefix, payload, author)."""
    n = rng.randint(2, 5)
    protocol = rng.choice("AB")
    g, plan, dep = deployment(n, protocol, seed=rng.randrange(10**6))
    led = Ledger()
    led.append(dep, PROVIDER)
    x = [rng.uniform(-1, 1) for _ in range(g.input_arity)]
    recs = honest_records(plan, dep, x)
    k = rng.randint(1, n)  # the step we tamper with
    for payload, author in recs[:k]:
        led.append(payload, author)
    step, author = recs[k]
    kind = rng.choice(["honest", "out_of_order", "wrong_author", "impostor", "wrong_hash", "unknown_hash", "mismatched_input"])
    if kind == "honest":
        return None, led, step, author, kind
    if kind == "out_of_order":
        if k == n:
            final, fa = recs[-1]
            led2 = Ledger.from_envelopes(led.envelopes)
            return L.INCOMPLETE_EXECUTION, led2, final, fa, kind
        later, la = recs[rng.randint(k + 1, n)]
        return L.OUT_OF_ORDER, led, later, la, kind
    if kind == "wrong_author":
        # correctly filled step signed by somebody else
        return L.WRONG_AUTHOR, led, step, vid(f"other{rng.random()}"), kind
    if kind == "impostor":
        other = vid(f"impostor{rng.random()}")
        return L.WRONG_AUTHOR, led, dataclasses.replace(step, vendor=other), other, kind
    if kind == "wrong_hash":
        j = rng.choice([j for j in range(n) if j != k - 1])
        return L.WRONG_COMPONENT, led, dataclasses.replace(step, component_hash=dep.component_leaf_hashes[j]), author, kind
    if kind == "unknown_hash":
        return L.UNKNOWN_COMPONENT, led, dataclasses.replace(step, component_hash=hashlib.sha256(rng.randbytes(8)).digest()), author, kind
    if protocol == "A":
        d = list(step.input)
        d[rng.randrange(len(d))] += rng.choice([1e-9, 0.5, -3.0])
        return L.INPUT_MISMATCH, led, dataclasses.replace(step, input=tuple(d)), author, kind
    return L.INPUT_MISMATCH, led, dataclasses.replace(step, input_hash=hash_value([rng.random()])), author, kind


@pytest.mark.criterion(4, "sequence enforcement, >= 500 fuzzed submissions, exact reason codes")
def test_sequence_enforcement():
    rng = random.Random(4)
    wrong = []
    kinds = set()
    for case in range(600):
        expected, led, payload, author, kind = fuzz_case(rng)
        kinds.add(kind)
        before = len(led)
        try:
            led.append(payload, author)
            got = None
        except L.ValidationRejected as exc:
            got = exc.reason
            assert len(led) == before
        if got != expected:
            wrong.append((case, kind, expected, got))
    assert wrong == []
    assert len(kinds) == 7
    # complete honest traces, both protocols, are accepted end to end
    for seed in range(50):
        for protocol in "AB":
            g, plan, dep = deployment(rng.randint(2, 5), protocol, seed)
            led = Ledger()
            led.append(dep, PROVIDER)
            for payload, author in honest_records(plan, dep, [rng.uniform(-1, 1) for _ in range(g.input_arity)]):
                led.append(payload, author)


# -- 5 ----------------------------------------------------------------------------------

MODELS = {
    "pipeline": {"family": "chain", "stages": 5, "width": 3},
    "layers": {"family": "mlp", "widths": [3, 6, 5, 4, 2]},
    "tree": {"family": "tree", "depth": 3, "features": 3},
    "ensemble": {"family": "ensemble", "learners": 5, "features": 3},
}


def soundness_scenario(seed, protocol):
    strategy = STRATEGIES[seed % 4]
    return Scenario(
        name=f"s{seed}", seed=seed, protocol=protocol, strategy=strategy, model=MODELS[strategy],
        vendors=4 + seed % 3, components=3, invocations=2 + seed % 3,
    )


@pytest.mark.criterion(5, "adversary soundness, 9 behaviors x 100 seeds, 100 honest runs")
def test_adversary_soundness():
    wrong = []
    for behavior in sorted(CATALOG):
        for seed in range(100):
            protocol = "ab"[seed % 2]
            result = run_scenario(inject_adversary(soundness_scenario(seed, protocol), behavior))
            target = result.expected.get(behavior)
            if target is None or result.culpable != {target} or result.roles[target] != CATALOG[behavior].party:
                wrong.append((behavior, seed, protocol))
    assert wrong == []
    accused = []
    for seed in range(100):
        result = run_scenario(soundness_scenario(seed, "ab"[seed % 2]))
        if not result.verdicts or any(v.outcome != ALL_HONEST for v in result.verdicts):
            accused.append(seed)
    assert accused == []


# -- 6 ----------------------------------------------------------------------------------


@pytest.mark.criterion(6, "knowledge bound, every coalition lacking a component fails, <= 6 vendors/components")
def test_collusion_bound():
    configs = 0
    for vendors, k in itertools.product(range(2, 7), range(2, 7)):
        for r in range(1, vendors):
            g = families.random_chain(k, 2, random.Random(vendors * 100 + k * 10 + r), "m")
            try:
                market, provider, vs, consumer, orch, plan = world(g, "pipeline", "B", vendors=vendors, n=k, replication=r)
            except PlacementInfeasible:
                assert k * (vendors - r) < vendors
                continue
            configs += 1
            holdings = {v.vid: v.holdings("m") for v in vs}
            full = set(range(1, k + 1))
            for v in vs:
                assert set(holdings[v.vid]) < full
            for size in range(1, vendors + 1):
                for coalition in itertools.combinations([v.vid for v in vs], size):
                    pooled = set().union(*(holdings[c] for c in coalition))
                    if pooled < full:
                        with pytest.raises(MissingFragments) as exc:
                            pool_fragments(holdings, coalition, k)
                        assert set(exc.value.missing) == full - pooled
                    else:
                        whole = pool_fragments(holdings, coalition, k)
                        x = [0.25, -0.5]
                        assert evaluate(whole, x) == evaluate(g, x)
    assert configs > 30


# -- 7 ----------------------------------------------------------------------------------


@pytest.mark.criterion(7, "hashed protocol keeps values off the ledger; replay reproduces every hash triple")
def test_hashed_privacy_and_replay():
    triples = 0
    for seed in range(12):
        strategy = STRATEGIES[seed % 4]
        wire = []
        g = model_for(strategy, seed)
        market, provider, vs, consumer, orch, plan = world(g, strategy, "B", vendors=4, n=3, seed=seed, tap=wire.append)
        rng = random.Random(seed)
        for _ in range(4):
            consumer.invoke("m", [rng.uniform(-2, 2) for _ in range(g.input_arity)])
        blob = market.ledger.dumps_jsonl().encode()
        blob += b"".join(encode(e.payload.as_tuple()) for e in market.ledger.envelopes)
        values = [m.body["input"] for m in wire if m.kind in (INVOKE, STEP_INPUT)]
        values += [m.body["output"] for m in wire if m.kind in (STEP_OUTPUT, FINAL_OUTPUT)]
        assert values
        for v in values:
            whole = encode(("Value", tuple(float(x) for x in v)))
            for needle in (whole, whole.hex().encode(), json.dumps(list(v)).encode()):
                assert needle not in blob
            for x in v:
                if x in (0.0, 1.0, -1.0):
                    continue  # too common to say anything
                packed = struct.pack(">d", x)
                assert packed not in blob and packed.hex().encode() not in blob
                assert repr(float(x)).encode() not in blob
        # replay: each hashed step from what crossed the wire and the escrowed fragment
        sent = {(m.recipient, m.body["invocation_id"], m.body["index"]): m.body["input"] for m in wire if m.kind == STEP_INPUT}
        for env in market.ledger.envelopes:
            rec = env.payload
            if rec.KIND != "ExecutionStepHashed":
                continue
            d = sent[(market.actor(rec.vendor).endpoint, rec.invocation_id, rec.step_index)]
            frag = market.escrow.fragment("m", rec.step_index)
            assert (hash_value(d), hash_value(evaluate(frag, d)), hash_component(frag)) == (
                rec.input_hash, rec.output_hash, rec.component_hash,
            )
            triples += 1
    assert triples == 12 * 4 * 3


# -- 8 ----------------------------------------------------------------------------------


@pytest.mark.criterion(8, "usage accounting, c in [0, 50] exact, under-reporting caught with evidence")
def test_usage_accounting():
    rng = random.Random(8)
    counts = [0, 1, 50] + rng.sample(range(2, 50), 9)
    for c in counts:
        g = model_for("pipeline", c)
        protocol = "AB"[c % 2]
        market, provider, vs, consumer, orch, plan = world(g, "pipeline", protocol, vendors=4, n=3, seed=c)
        for j in range(c):
            consumer.invoke("m", [rng.uniform(-1, 1) for _ in range(g.input_arity)])
        assert market.ledger.usage_count("m") == c
        honest = usage_audit(market.ledger, "m", {v.vid: v.report_usage("m") for v in vs})
        assert honest.outcome == ALL_HONEST
        cheat = vs[rng.randrange(len(vs))]
        cheat.behavior = "underreport"
        reported = cheat.report_usage("m")
        v = usage_audit(market.ledger, "m", {w.vid: w.report_usage("m") for w in vs})
        if c == 0:
            assert reported == 0 and v.outcome == ALL_HONEST
            continue
        assert reported < c
        assert (v.outcome, v.culpable, v.reason) == (CULPABLE, cheat.vid, "under-reporting")
        (ev,) = v.evidence
        assert (ev.ledger_value, ev.compared_value, ev.matches) == (str(c), str(reported), False)
        assert market.ledger[ev.seq].payload.KIND == "ModelDeployment"


# -- 9 ----------------------------------------------------------------------------------


@pytest.mark.criterion(9, "determinism, 10 repeated runs give byte-identical ledgers")
def test_determinism(tmp_path):
    for name in ("honest_pipeline", "orchestrated_tamper"):
        scenario = load_scenario(ROOT / "scenarios" / f"{name}.json")
        files = []
        for k in range(8):
            path = tmp_path / f"{name}-{k}.jsonl"
            run_scenario(scenario).market.ledger.save(path)
            files.append(path.read_bytes())
        # two more in fresh interpreters with different hash seeds
        for k, hashseed in enumerate(("1", "4242")):
            path = tmp_path / f"{name}-sub{k}.jsonl"
            env = dict(os.environ, PYTHONHASHSEED=hashseed)
            subprocess.run(
                [sys.executable, "-m", "apimarket", "run", "--scenario", str(ROOT / "scenarios" / f"{name}.json"),
                 "--ledger-out", str(path), "--report-out", str(tmp_path / f"{name}-sub{k}.json"), "--no-figures"],
                check=True, env=env, capture_output=True,
            )
            files.append(path.read_bytes())
        assert len(files) == 10
        assert len(set(files)) == 1


# -- 10 ---------------------------------------------------------------------------------


@pytest.mark.criterion(10, "cross-protocol agreement on 20 pairs; whole suite < 5 min")
def test_cross_protocol_agreement():
    rng = random.Random(10)
    for k in range(20):
        strategy = STRATEGIES[k % 4]
        g = model_for(strategy, 100 + k)
        x = [rng.uniform(-3, 3) for _ in range(g.input_arity)]
        outs = []
        for protocol in "AB":
            market, provider, vs, consumer, orch, plan = world(g, strategy, protocol, vendors=4, n=3, seed=k)
            outs.append(bits(consumer.invoke("m", x)))
        assert outs[0] == outs[1] == bits(evaluate(g, x))


@pytest.mark.criterion(10, "cross-protocol agreement on 20 pairs; whole suite < 5 min")
def test_suite_time_budget():
    # runs last in this module
    assert time.perf_counter() - _START < 300
