"""Splitting a model into vendor-hosted sub-components.

Every strategy reduces to the same primitive: order the compute nodes of the
canonical graph, group them into ``n`` contiguous runs, and turn each run into
a standalone fragment. Values crossing a seam are flattened into scalars,
passed through ``Output``/``Input`` pairs, and re-assembled with ``Concat``.
Those helper nodes are flagged ``glue``. Decision trees additionally thread a
routing token through the fragments, so the fragments still execute as a
pipeline.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .encoding import sha256
from .model_ir import (
    GraphBuilder,
    ModelGraph,
    graph_from_json,
    graph_to_json,
    hash_component,
)

STRATEGIES = ("pipeline", "layers", "tree", "ensemble")
MERKLE_INTERIOR_TAG = b"\x01"


class NotPartitionable(ValueError):
    pass


class InsufficientVendors(ValueError):
    pass


class PlacementInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class SubComponent:
    index: int
    fragment: ModelGraph
    component_hash: bytes
    # canonical node indices of the source graph realized by non-glue nodes
    origin: tuple[int, ...] = ()

    @classmethod
    def of(cls, index: int, fragment: ModelGraph, origin: Iterable[int] = ()) -> SubComponent:
        return cls(index, fragment, hash_component(fragment), tuple(origin))


@dataclass(frozen=True)
class MerkleRoot:
    root: bytes
    leaf_hashes: tuple[bytes, ...]

    def verify(self) -> bool:
        return merkle_root(self.leaf_hashes) == self.root


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    """Binary Merkle tree; an odd level duplicates its last node.

    Interior nodes hash ``0x01 || left || right``. Leaves are the component
    digests themselves, whose preimages begin with the encoder's sequence tag
    rather than 0x01, so the two levels cannot be confused.
    """
    if not leaves:
        raise ValueError("Merkle tree needs at least one leaf")
    level = list(leaves)
    while True:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(MERKLE_INTERIOR_TAG + level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]


def model_signature(components: Sequence[SubComponent] | Sequence[bytes]) -> MerkleRoot:
    leaves = tuple(c.component_hash if isinstance(c, SubComponent) else bytes(c) for c in components)
    return MerkleRoot(merkle_root(leaves), leaves)


@dataclass(frozen=True)
class PartitionPlan:
    model_id: str
    strategy: str
    components: tuple[SubComponent, ...]
    signature: MerkleRoot
    execution_order: tuple[int, ...]
    # (component, component it waits on); the tree strategy records routing parents
    dependencies: tuple[tuple[int, int], ...] = ()
    placement: tuple[tuple[int, tuple[bytes, ...]], ...] = ()
    source_nodes: int = 0

    @property
    def n(self) -> int:
        return len(self.components)

    def holders(self, index: int) -> tuple[bytes, ...]:
        return dict(self.placement).get(index, ())

    def fragments(self) -> list[ModelGraph]:
        return [c.fragment for c in self.components]

    def with_placement(self, placement: dict[int, Sequence[bytes]]) -> PartitionPlan:
        return replace(self, placement=tuple((i, tuple(placement[i])) for i in sorted(placement)))


def _finish(graph: ModelGraph, strategy: str, pieces: list[tuple[ModelGraph, tuple[int, ...]]], deps=None) -> PartitionPlan:
    comps = tuple(SubComponent.of(i + 1, frag, origin) for i, (frag, origin) in enumerate(pieces))
    n = len(comps)
    if deps is None:
        deps = tuple((i, i - 1) for i in range(2, n + 1))
    source = sum(1 for node in graph.nodes if not node.glue)
    return PartitionPlan(
        graph.model_id,
        strategy,
        comps,
        model_signature(comps),
        tuple(range(1, n + 1)),
        tuple(deps),
        (),
        source,
    )


# -- the generic sequential cut ---------------------------------------------------


def _cut_sequential(
    g: ModelGraph,
    groups: list[list[int]],
    origin_of: Sequence[int | None] | None = None,
) -> list[tuple[ModelGraph, tuple[int, ...]]]:
    if origin_of is None:
        origin_of = list(range(len(g.nodes)))
    n = len(groups)
    widths = g.widths
    inputs, outputs = g.input_nodes(), g.output_nodes()
    group_of: dict[int, int] = {k: -1 for k in inputs}
    for t, grp in enumerate(groups):
        for k in grp:
            group_of[k] = t
    last_use: dict[int, int] = {}
    for k, node in enumerate(g.nodes):
        t = n - 1 if node.op == "Output" else group_of[k]
        for i in node.inputs:
            last_use[i] = max(last_use.get(i, -1), t)
    live_after = [
        [v for v in sorted(last_use) if group_of[v] <= t < last_use[v]]
        for t in range(n)
    ]

    pieces = []
    for t in range(n):
        b = GraphBuilder(f"{g.model_id}/S{t + 1}")
        mapped: dict[int, int] = {}
        slots: dict[int, list[int]] = {}
        origin: list[int] = []

        def keep(k: int, glue: bool) -> None:
            if not glue:
                origin.append(origin_of[k])

        if t == 0:
            for k in inputs:
                glue = origin_of[k] is None
                mapped[k] = b.input(glue)
                keep(k, glue)
        else:
            for v in live_after[t - 1]:
                slots[v] = b.inputs(widths[v], glue=True)

        def get(v: int) -> int:
            if v not in mapped:
                s = slots[v]
                mapped[v] = s[0] if len(s) == 1 else b.concat(s, glue=True)
            return mapped[v]

        for k in groups[t]:
            node = g.nodes[k]
            glue = node.glue or origin_of[k] is None
            mapped[k] = b.add(node.op, [get(i) for i in node.inputs], node.params, glue)
            keep(k, glue)

        if t < n - 1:
            for v in live_after[t]:
                if v not in mapped and v in slots:
                    b.outputs(slots[v], glue=True)
                elif widths[v] == 1:
                    b.output(get(v), glue=True)
                else:
                    src = get(v)
                    b.outputs((b.pick(src, j, glue=True) for j in range(widths[v])), glue=True)
        else:
            for o in outputs:
                glue = origin_of[o] is None
                b.output(get(g.nodes[o].inputs[0]), glue)
                keep(o, glue)
        pieces.append((b.build(), tuple(origin)))
    return pieces


def _balanced_sizes(count: int, parts: int) -> list[int]:
    q, r = divmod(count, parts)
    return [q + 1] * r + [q] * (parts - r)


def _split_by_sizes(items: list, sizes: list[int]) -> list[list]:
    out, pos = [], 0
    for s in sizes:
        out.append(items[pos : pos + s])
        pos += s
    return out


def _segments_needed(weights: Sequence[int], bound: int) -> int:
    count, acc = 0, None
    for w in weights:
        if acc is None or acc + w > bound:
            count, acc = count + 1, w
        else:
            acc += w
    return count


def _minmax_segments(weights: list[int], n: int) -> list[int]:
    """Segment sizes minimizing the heaviest segment; ties cut as early as possible."""
    def feasible(ws: Sequence[int], k: int, bound: int) -> bool:
        return len(ws) >= k and max(ws, default=0) <= bound and _segments_needed(ws, bound) <= k

    lo, hi = max(weights), sum(weights)
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(weights, n, mid):
            hi = mid
        else:
            lo = mid + 1
    bound = lo
    sizes, start = [], 0
    for seg in range(n - 1):
        for end in range(start + 1, len(weights)):
            if sum(weights[start:end]) <= bound and feasible(weights[end:], n - seg - 1, bound):
                sizes.append(end - start)
                start = end
                break
    sizes.append(len(weights) - start)
    return sizes


def _flatten(units: list[list[int]]) -> list[int]:
    return [k for u in units for k in u]


# -- pipeline / layers --------------------------------------------------------------

_LEADING_OPS = ("Const", "Concat", "Pick")


def pipeline_stages(g: ModelGraph) -> list[list[int]]:
    """Group canonical compute nodes into stages.

    Constants and re-shaping nodes ride with the stage that consumes them; any
    trailing ones join the final stage.
    """
    units: list[list[int]] = []
    pending: list[int] = []
    for k, node in enumerate(g.nodes):
        if not node.is_compute:
            continue
        pending.append(k)
        if node.op not in _LEADING_OPS:
            units.append(pending)
            pending = []
    if pending:
        if units:
            units[-1].extend(pending)
        else:
            units.append(pending)
    return units


def partition_pipeline(graph: ModelGraph, n: int) -> PartitionPlan:
    g = graph.canonical()
    if n < 1:
        raise NotPartitionable(f"cannot split into {n} components")
    units = pipeline_stages(g)
    if n == 1:
        return _finish(g, "pipeline", _cut_sequential(g, [_flatten(units)]))
    if len(units) < n:
        raise NotPartitionable(f"{g.model_id} has {len(units)} stages, fewer than {n}")
    sizes = _minmax_segments([len(u) for u in units], n)
    groups = [_flatten(part) for part in _split_by_sizes(units, sizes)]
    return _finish(g, "pipeline", _cut_sequential(g, groups))


def network_layers(g: ModelGraph) -> list[list[int]]:
    """Split a feed-forward Affine/ReLU stack into layers, or raise NotPartitionable."""
    compute = [k for k, node in enumerate(g.nodes) if node.is_compute]
    layers: list[list[int]] = []
    lead: list[int] = []
    prev: int | None = None
    for k in compute:
        node = g.nodes[k]
        if node.op == "Concat" and not layers and not lead:
            if any(g.nodes[i].op != "Input" for i in node.inputs):
                raise NotPartitionable("network input must be built from raw inputs")
            lead.append(k)
            prev = k
        elif node.op == "Affine":
            src = node.inputs[0]
            if prev is not None and src != prev:
                raise NotPartitionable(f"node {k} breaks the layer chain")
            if prev is None and g.nodes[src].op != "Input":
                raise NotPartitionable("first layer must read the network input")
            layers.append(lead + [k])
            lead = []
            prev = k
        elif node.op == "Relu":
            if not layers or node.inputs[0] != prev or g.nodes[prev].op != "Affine":
                raise NotPartitionable(f"node {k}: activation without a preceding layer")
            layers[-1].append(k)
            prev = k
        elif node.op == "Pick" and layers and node.inputs[0] == prev:
            layers[-1].append(k)
        else:
            raise NotPartitionable(f"node {k} ({node.op}) is not part of a layer stack")
    if not layers:
        raise NotPartitionable("no layers found")
    return layers


def partition_layers(graph: ModelGraph, n: int) -> PartitionPlan:
    g = graph.canonical()
    layers = network_layers(g)
    if n < 1 or n > len(layers):
        raise NotPartitionable(f"{len(layers)} layers cannot fill {n} components")
    stacks = _split_by_sizes(layers, _balanced_sizes(len(layers), n))
    return _finish(g, "layers", _cut_sequential(g, [_flatten(s) for s in stacks]))


# -- ensembles ------------------------------------------------------------------------


def _trace_through_picks(g: ModelGraph) -> tuple[int, list[int]]:
    """Return the node feeding every output (through Pick nodes) and those Picks."""
    roots, picks = set(), []
    for o in g.output_nodes():
        src = g.nodes[o].inputs[0]
        if g.nodes[src].op == "Pick":
            picks.append(src)
            src = g.nodes[src].inputs[0]
        roots.add(src)
    if len(roots) != 1:
        raise NotPartitionable("outputs do not come from a single root node")
    return roots.pop(), picks


def _ancestors(g: ModelGraph, root: int) -> set[int]:
    seen, stack = set(), [root]
    while stack:
        k = stack.pop()
        if k in seen or g.nodes[k].op == "Input":
            continue
        seen.add(k)
        stack.extend(g.nodes[k].inputs)
    return seen


def partition_ensemble(graph: ModelGraph, n: int, combiner_parts: int | None = None) -> PartitionPlan:
    """Group weak learners into components and optionally split the combiner.

    A split combiner becomes a chain of partial sums that continues the same
    left-to-right accumulation, so the result stays bitwise identical.
    """
    g = graph.canonical()
    top, picks = _trace_through_picks(g)
    comb = g.nodes[top]
    if comb.op not in ("Average", "WeightedSum"):
        raise NotPartitionable(f"{g.model_id}: root is {comb.op}, not an ensemble combiner")
    roots = list(comb.inputs)
    m = len(roots)
    if len(set(roots)) != m:
        raise NotPartitionable("a weak learner feeds the combiner twice")
    weak_sets = [_ancestors(g, r) for r in roots]
    claimed: set[int] = set()
    for s in weak_sets:
        if claimed & s:
            raise NotPartitionable("weak learners share nodes")
        claimed |= s
    compute = {k for k, node in enumerate(g.nodes) if node.is_compute}
    if compute != claimed | {top} | set(picks):
        raise NotPartitionable("graph has nodes outside the weak learners and combiner")

    if n == 1 and combiner_parts in (None, 1):
        return _finish(g, "ensemble", _cut_sequential(g, [sorted(compute)]))
    if combiner_parts is None:
        combiner_parts = 1 if n - 1 <= m else n - m
    n_weak = n - combiner_parts
    if not (1 <= n_weak <= m and 1 <= combiner_parts <= m):
        raise NotPartitionable(f"{m} weak learners cannot fill {n} components ({combiner_parts} combiner parts)")

    # rebuild with each learner contiguous and the combiner expanded into stages
    b = GraphBuilder(g.model_id)
    mapped: dict[int, int] = {}
    origin_of: list[int | None] = []

    def copy(k: int) -> int:
        node = g.nodes[k]
        mapped[k] = b.add(node.op, [mapped[i] for i in node.inputs], node.params, node.glue)
        origin_of.append(k)
        return mapped[k]

    for k in g.input_nodes():
        copy(k)
    learner_nodes = []
    for s in weak_sets:
        learner_nodes.append([copy(k) for k in sorted(s)])
    terms = [mapped[r] for r in roots]
    stage_nodes: list[int] = []
    if combiner_parts == 1:
        stage_nodes.append(copy(top))
    else:
        sizes = _balanced_sizes(m, combiner_parts)
        chunks = _split_by_sizes(list(range(m)), sizes)
        acc: int | None = None
        for s, chunk in enumerate(chunks):
            final = s == len(chunks) - 1
            srcs = ([acc] if acc is not None else []) + [terms[j] for j in chunk]
            if comb.op == "WeightedSum":
                w = [comb.params[0][j] for j in chunk]
                acc = b.weighted_sum(srcs, ([1.0] if s else []) + w, glue=not final)
            elif final:
                acc = b.average(srcs, divisor=comb.params[0])
            else:
                acc = b.add_(srcs, glue=True)
            origin_of.append(top if final else None)
            stage_nodes.append(acc)
        mapped[top] = acc
    tail = [copy(k) for k in picks]
    for k in g.output_nodes():
        copy(k)
    g2 = b.build()

    groups = [_flatten(part) for part in _split_by_sizes(learner_nodes, _balanced_sizes(m, n_weak))]
    groups += [[k] for k in stage_nodes]
    groups[-1].extend(tail)
    return _finish(g, "ensemble", _cut_sequential(g2, groups, origin_of))


# -- decision trees --------------------------------------------------------------------


def _tree_structure(g: ModelGraph) -> tuple[int, list[int]]:
    root, picks = _trace_through_picks(g)
    users = g.consumers()
    seen: set[int] = set()
    stack = [root]
    while stack:
        k = stack.pop()
        node = g.nodes[k]
        if k != root and len(users[k]) != 1:
            raise NotPartitionable(f"node {k} has {len(users[k])} parents; not a tree")
        seen.add(k)
        if node.op == "Const":
            continue
        if node.op != "Branch":
            raise NotPartitionable(f"node {k} ({node.op}) is not a tree node")
        cond = g.nodes[node.inputs[0]]
        if cond.op != "Compare" or g.nodes[cond.inputs[0]].op != "Input" or len(users[node.inputs[0]]) != 1:
            raise NotPartitionable(f"branch {k} must test one raw input feature")
        seen.add(node.inputs[0])
        stack.extend(node.inputs[1:])
    compute = {k for k, node in enumerate(g.nodes) if node.is_compute}
    if compute != seen | set(picks):
        raise NotPartitionable("graph has nodes outside the decision tree")
    return root, picks


def partition_tree(graph: ModelGraph, max_components: int) -> PartitionPlan:
    """Cut a decision tree into subtrees evaluated as a routed pipeline.

    Components after the first receive ``[x, route, verdict]``. A component
    acts only when ``route`` equals its own index; a leaf sets ``route`` to 0
    and writes the verdict, a cut edge sets ``route`` to the index of the
    component holding that subtree. Components are numbered in breadth-first
    order of their roots, so routing always points forward.
    """
    g = graph.canonical()
    root, picks = _tree_structure(g)
    if max_components < 1:
        raise NotPartitionable("need at least one component")
    compute = sorted(k for k, node in enumerate(g.nodes) if node.is_compute)
    if max_components == 1 or g.nodes[root].op != "Branch":
        return _finish(g, "tree", _cut_sequential(g, [compute]))

    def branch_kids(k: int) -> list[int]:
        return [c for c in g.nodes[k].inputs[1:] if g.nodes[c].op == "Branch"]

    comp_roots = [root]
    queue = deque([root])
    while queue:
        k = queue.popleft()
        kids = branch_kids(k)
        if kids and len(comp_roots) + len(kids) <= max_components:
            comp_roots.extend(kids)
        queue.extend(kids)
    if len(comp_roots) == 1:
        return _finish(g, "tree", _cut_sequential(g, [compute]))

    index_of = {r: i + 1 for i, r in enumerate(comp_roots)}
    parent_comp: dict[int, int] = {}

    def members(r: int) -> None:
        stack = [r]
        while stack:
            k = stack.pop()
            for c in g.nodes[k].inputs[1:] if g.nodes[k].op == "Branch" else ():
                if c in index_of:
                    parent_comp[index_of[c]] = index_of[r]
                else:
                    stack.append(c)

    for r in comp_roots:
        members(r)

    n = len(comp_roots)
    width = g.widths[root]
    d = g.input_arity
    inputs = g.input_nodes()
    pieces = []
    for pos, croot in enumerate(comp_roots):
        k_idx = pos + 1
        b = GraphBuilder(f"{g.model_id}/S{k_idx}")
        origin: list[int] = []
        if k_idx == 1:
            xs = [b.input() for _ in range(d)]
            origin.extend(inputs)
        else:
            xs = b.inputs(d, glue=True)
            route = b.input(glue=True)
            verdict = b.inputs(width, glue=True)

        def build(k: int, here: int = croot) -> int:
            if k != here and k in index_of:
                return b.const([float(index_of[k])] + [0.0] * width, glue=True)
            node = g.nodes[k]
            if node.op == "Const":
                leaf = b.add("Const", (), node.params)
                origin.append(k)
                return b.concat([b.const([0.0], glue=True), leaf], glue=True)
            ck = node.inputs[0]
            cond = g.nodes[ck]
            c = b.add("Compare", [xs[g.nodes[cond.inputs[0]].params[0]]], cond.params)
            origin.append(ck)
            left = build(node.inputs[1])
            right = build(node.inputs[2])
            out = b.add("Branch", [c, left, right])
            origin.append(k)
            return out

        result = build(croot)
        if k_idx == 1:
            chosen = result
        else:
            above = b.compare(route, k_idx - 0.5, ">", glue=True)
            below = b.compare(route, k_idx + 0.5, "<=", glue=True)
            active = b.mul([above, below], glue=True)
            chosen = b.branch(active, result, b.concat([route] + verdict, glue=True), glue=True)
        if k_idx < n:
            b.outputs(xs, glue=True)
            b.outputs((b.pick(chosen, j, glue=True) for j in range(width + 1)), glue=True)
        else:
            if picks:
                for j, pk in enumerate(picks):
                    b.output(b.pick(chosen, g.nodes[pk].params[0] + 1))
                    origin.append(pk)
            else:
                b.output(b.pick(chosen, 1, glue=True))
            origin.extend(g.output_nodes())
        pieces.append((b.build(), tuple(origin)))

    deps = tuple(sorted(parent_comp.items()))
    return _finish(g, "tree", pieces, deps)


def partition(graph: ModelGraph, strategy: str, n: int, **kwargs) -> PartitionPlan:
    if strategy == "pipeline":
        return partition_pipeline(graph, n)
    if strategy == "layers":
        return partition_layers(graph, n)
    if strategy == "tree":
        return partition_tree(graph, n)
    if strategy == "ensemble":
        return partition_ensemble(graph, n, **kwargs)
    raise ValueError(f"unknown strategy {strategy!r}")


def joint_plan(plans: Sequence[PartitionPlan], model_id: str) -> PartitionPlan:
    """Concatenate per-provider plans of consecutive model parts into one plan."""
    comps = []
    for plan in plans:
        for c in plan.components:
            comps.append(SubComponent(len(comps) + 1, c.fragment, c.component_hash, ()))
    n = len(comps)
    return PartitionPlan(
        model_id,
        "pipeline",
        tuple(comps),
        model_signature(comps),
        tuple(range(1, n + 1)),
        tuple((i, i - 1) for i in range(2, n + 1)),
        (),
        sum(p.source_nodes for p in plans),
    )


# -- placement ---------------------------------------------------------------------


def place_sequential(n: int, vendors: Sequence[bytes]) -> dict[int, tuple[bytes, ...]]:
    """One distinct vendor per component, in the order given."""
    if len(set(vendors)) < n:
        raise InsufficientVendors(f"{n} components need {n} distinct vendors, have {len(set(vendors))}")
    distinct = list(dict.fromkeys(vendors))
    return {i + 1: (distinct[i],) for i in range(n)}


def place_overlapping(k: int, r: int, vendors: Sequence[bytes]) -> dict[int, tuple[bytes, ...]]:
    """Each component on ``r`` vendors while no vendor holds all ``k``.

    Component ``i`` skips a cyclic window of ``N - r`` vendors; the windows
    cover every vendor exactly when such a placement exists, i.e. when
    ``k * (N - r) >= N``.
    """
    vendors = list(dict.fromkeys(vendors))
    total = len(vendors)
    if r < 1 or r > total:
        raise InsufficientVendors(f"replication {r} needs at least {r} vendors, have {total}")
    skip = total - r
    if skip == 0 or k * skip < total:
        raise PlacementInfeasible(f"K={k}, r={r}, {total} vendors forces some vendor to hold every component")
    placement = {}
    for i in range(k):
        out = {(i * skip + j) % total for j in range(skip)}
        placement[i + 1] = tuple(v for pos, v in enumerate(vendors) if pos not in out)
    return placement


# -- JSON export -----------------------------------------------------------------------


def plan_to_json(plan: PartitionPlan) -> dict:
    return {
        "model_id": plan.model_id,
        "strategy": plan.strategy,
        "signature": plan.signature.root.hex(),
        "components": [
            {
                "index": c.index,
                "component_hash": c.component_hash.hex(),
                "fragment": graph_to_json(c.fragment),
            }
            for c in plan.components
        ],
        "execution_order": list(plan.execution_order),
        "dependencies": [list(d) for d in plan.dependencies],
        "placement": {str(i): [v.hex() for v in vs] for i, vs in plan.placement},
        "source_nodes": plan.source_nodes,
    }


class PlanIntegrityError(ValueError):
    pass


def plan_from_json(doc: dict) -> PartitionPlan:
    comps = []
    for entry in doc["components"]:
        comp = SubComponent.of(int(entry["index"]), graph_from_json(entry["fragment"]))
        if comp.component_hash.hex() != entry["component_hash"]:
            raise PlanIntegrityError(f"component {comp.index} does not match its recorded hash")
        comps.append(comp)
    sig = model_signature(comps)
    if sig.root.hex() != doc["signature"]:
        raise PlanIntegrityError("recomputed signature differs from the recorded one")
    return PartitionPlan(
        doc["model_id"],
        doc["strategy"],
        tuple(comps),
        sig,
        tuple(doc["execution_order"]),
        tuple(tuple(d) for d in doc.get("dependencies", ())),
        tuple((int(i), tuple(bytes.fromhex(v) for v in vs)) for i, vs in sorted(doc.get("placement", {}).items(), key=lambda kv: int(kv[0]))),
        int(doc.get("source_nodes", 0)),
    )


def dumps_plan(plan: PartitionPlan) -> str:
    return json.dumps(plan_to_json(plan), indent=1)


def loads_plan(text: str) -> PartitionPlan:
    return plan_from_json(json.loads(text))
