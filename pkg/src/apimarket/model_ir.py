"""Computation-graph representation for the models hosted behind an API.

A :class:`ModelGraph` is a list of :class:`Node` objects in topological
order. Every node produces a vector of floats. ``Input`` and ``Output`` nodes
carry scalars (width 1); ``Concat`` and ``Pick`` convert between scalars and
wider vectors.

Evaluation is plain Python float arithmetic with a fixed left-to-right
reduction order, so a graph and any recomposition of its fragments produce
bitwise-identical results.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .encoding import decode, encode, float_to_text, sha256, text_to_float

Value = tuple[float, ...]

OPS = (
    "Input",
    "Const",
    "Affine",
    "Relu",
    "Add",
    "Mul",
    "WeightedSum",
    "Average",
    "Compare",
    "Branch",
    "Concat",
    "Pick",
    "Output",
)
COMPARATORS = ("<=", ">")


class ModelError(Exception):
    pass


class MalformedGraph(ModelError, ValueError):
    pass


class ArityMismatch(ModelError, ValueError):
    pass


class NonFiniteValue(ModelError, ArithmeticError):
    pass


def _floats(xs: Iterable[Any]) -> tuple[float, ...]:
    return tuple(float(x) for x in xs)


def _normalize_params(op: str, params: tuple) -> tuple:
    if op in ("Input", "Output", "Pick"):
        (index,) = params
        return (int(index),)
    if op == "Const":
        return (_floats(params[0]),)
    if op == "Affine":
        weight, bias = params
        return (tuple(_floats(row) for row in weight), _floats(bias))
    if op == "WeightedSum":
        return (_floats(params[0]),)
    if op == "Average":
        (divisor,) = params
        return (int(divisor),)
    if op == "Compare":
        threshold, cmp = params
        return (float(threshold), str(cmp))
    if params:
        raise MalformedGraph(f"{op} takes no parameters")
    return ()


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...] = ()
    params: tuple = ()
    glue: bool = False

    def __post_init__(self) -> None:
        if self.op not in OPS:
            raise MalformedGraph(f"unknown op {self.op!r}")
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))
        try:
            params = _normalize_params(self.op, tuple(self.params))
        except (TypeError, ValueError) as exc:
            raise MalformedGraph(f"bad parameters for {self.op}: {exc}") from exc
        object.__setattr__(self, "params", params)

    @property
    def is_compute(self) -> bool:
        return self.op not in ("Input", "Output")

    def remap(self, mapping: Sequence[int] | dict[int, int], glue: bool | None = None) -> Node:
        return Node(
            self.op,
            tuple(mapping[i] for i in self.inputs),
            self.params,
            self.glue if glue is None else glue,
        )


def _check_width(cond: bool, msg: str) -> None:
    if not cond:
        raise MalformedGraph(msg)


def _node_width(k: int, node: Node, widths: list[int]) -> int:
    op, ins = node.op, [widths[i] for i in node.inputs]
    if op == "Input":
        _check_width(not ins, f"node {k}: Input takes no operands")
        return 1
    if op == "Const":
        _check_width(not ins and len(node.params[0]) > 0, f"node {k}: bad Const")
        return len(node.params[0])
    if op == "Affine":
        weight, bias = node.params
        _check_width(len(ins) == 1, f"node {k}: Affine takes one operand")
        _check_width(len(weight) > 0 and len(weight) == len(bias), f"node {k}: Affine shape")
        _check_width(all(len(row) == ins[0] for row in weight), f"node {k}: Affine width")
        return len(weight)
    if op == "Relu":
        _check_width(len(ins) == 1, f"node {k}: Relu takes one operand")
        return ins[0]
    if op in ("Add", "Average"):
        _check_width(len(ins) >= 1 and len(set(ins)) == 1, f"node {k}: {op} operand widths")
        if op == "Average":
            _check_width(node.params[0] >= 1, f"node {k}: Average divisor")
        return ins[0]
    if op == "Mul":
        _check_width(len(ins) >= 2 and len(set(ins)) == 1, f"node {k}: Mul operand widths")
        return ins[0]
    if op == "WeightedSum":
        _check_width(
            len(ins) >= 1 and len(set(ins)) == 1 and len(node.params[0]) == len(ins),
            f"node {k}: WeightedSum shape",
        )
        return ins[0]
    if op == "Compare":
        _check_width(len(ins) == 1 and ins[0] == 1, f"node {k}: Compare takes a scalar")
        _check_width(node.params[1] in COMPARATORS, f"node {k}: comparator")
        return 1
    if op == "Branch":
        _check_width(len(ins) == 3 and ins[0] == 1 and ins[1] == ins[2], f"node {k}: Branch shape")
        return ins[1]
    if op == "Concat":
        _check_width(len(ins) >= 1, f"node {k}: Concat needs operands")
        return sum(ins)
    if op == "Pick":
        _check_width(len(ins) == 1 and 0 <= node.params[0] < ins[0], f"node {k}: Pick index")
        return 1
    if op == "Output":
        _check_width(len(ins) == 1 and ins[0] == 1, f"node {k}: Output takes a scalar")
        return 1
    raise MalformedGraph(f"node {k}: unknown op {op}")  # pragma: no cover


@dataclass(frozen=True)
class ModelGraph:
    model_id: str
    nodes: tuple[Node, ...]
    input_arity: int
    output_arity: int
    _widths: tuple[int, ...] = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        widths: list[int] = []
        inputs_seen: list[int] = []
        outputs_seen: list[int] = []
        consumers = [0] * len(self.nodes)
        for k, node in enumerate(self.nodes):
            for i in node.inputs:
                if not 0 <= i < k:
                    raise MalformedGraph(f"node {k} references {i}, not an earlier node")
                if self.nodes[i].op == "Output":
                    raise MalformedGraph(f"node {k} consumes Output node {i}")
                consumers[i] += 1
            widths.append(_node_width(k, node, widths))
            if node.op == "Input":
                inputs_seen.append(node.params[0])
            elif node.op == "Output":
                outputs_seen.append(node.params[0])
        if sorted(inputs_seen) != list(range(self.input_arity)):
            raise MalformedGraph(f"expected Input indices 0..{self.input_arity - 1}")
        if sorted(outputs_seen) != list(range(self.output_arity)):
            raise MalformedGraph(f"expected Output indices 0..{self.output_arity - 1}")
        # every compute node must feed some output
        live = [node.op == "Output" for node in self.nodes]
        for k in range(len(self.nodes) - 1, -1, -1):
            if live[k]:
                for i in self.nodes[k].inputs:
                    live[i] = True
        for k, node in enumerate(self.nodes):
            if node.is_compute and not live[k]:
                raise MalformedGraph(f"node {k} ({node.op}) does not reach an output")
        object.__setattr__(self, "_widths", tuple(widths))

    @property
    def widths(self) -> tuple[int, ...]:
        return self._widths

    def input_nodes(self) -> list[int]:
        """Indices of Input nodes, ordered by input position."""
        found = {n.params[0]: k for k, n in enumerate(self.nodes) if n.op == "Input"}
        return [found[i] for i in range(self.input_arity)]

    def output_nodes(self) -> list[int]:
        found = {n.params[0]: k for k, n in enumerate(self.nodes) if n.op == "Output"}
        return [found[i] for i in range(self.output_arity)]

    def consumers(self) -> list[list[int]]:
        users: list[list[int]] = [[] for _ in self.nodes]
        for k, node in enumerate(self.nodes):
            for i in node.inputs:
                users[i].append(k)
        return users

    def canonical_order(self) -> list[int]:
        """Inputs by position, then a post-order walk from each output.

        Operands are visited left to right, so the order depends only on the
        graph structure and not on how the node list happened to be arranged.
        """
        order = list(self.input_nodes())
        seen = set(order)
        for root in self.output_nodes():
            stack: list[tuple[int, int]] = [(root, 0)]
            while stack:
                k, pos = stack.pop()
                if k in seen:
                    continue
                ins = self.nodes[k].inputs
                if pos < len(ins):
                    stack.append((k, pos + 1))
                    if ins[pos] not in seen:
                        stack.append((ins[pos], 0))
                else:
                    seen.add(k)
                    order.append(k)
        return order

    def canonical(self) -> ModelGraph:
        order = self.canonical_order()
        if order == list(range(len(self.nodes))):
            return self
        where = {old: new for new, old in enumerate(order)}
        nodes = [self.nodes[old].remap(where) for old in order]
        return ModelGraph(self.model_id, tuple(nodes), self.input_arity, self.output_arity)

    def with_id(self, model_id: str) -> ModelGraph:
        return ModelGraph(model_id, self.nodes, self.input_arity, self.output_arity)


class GraphBuilder:
    """Incremental construction helper; every method returns a node index."""

    def __init__(self, model_id: str):
        self.model_id = model_id
        self.nodes: list[Node] = []
        self._n_inputs = 0
        self._n_outputs = 0

    def add(self, op: str, inputs: Sequence[int] = (), params: tuple = (), glue: bool = False) -> int:
        self.nodes.append(Node(op, tuple(inputs), params, glue))
        return len(self.nodes) - 1

    def input(self, glue: bool = False) -> int:
        k = self.add("Input", (), (self._n_inputs,), glue)
        self._n_inputs += 1
        return k

    def inputs(self, count: int, glue: bool = False) -> list[int]:
        return [self.input(glue) for _ in range(count)]

    def output(self, src: int, glue: bool = False) -> int:
        k = self.add("Output", (src,), (self._n_outputs,), glue)
        self._n_outputs += 1
        return k

    def outputs(self, srcs: Iterable[int], glue: bool = False) -> list[int]:
        return [self.output(s, glue) for s in srcs]

    def const(self, values: Sequence[float], glue: bool = False) -> int:
        return self.add("Const", (), (tuple(values),), glue)

    def affine(self, src: int, weight: Sequence[Sequence[float]], bias: Sequence[float], glue: bool = False) -> int:
        return self.add("Affine", (src,), (tuple(map(tuple, weight)), tuple(bias)), glue)

    def relu(self, src: int, glue: bool = False) -> int:
        return self.add("Relu", (src,), (), glue)

    def add_(self, srcs: Sequence[int], glue: bool = False) -> int:
        return self.add("Add", srcs, (), glue)

    def mul(self, srcs: Sequence[int], glue: bool = False) -> int:
        return self.add("Mul", srcs, (), glue)

    def weighted_sum(self, srcs: Sequence[int], weights: Sequence[float], glue: bool = False) -> int:
        return self.add("WeightedSum", srcs, (tuple(weights),), glue)

    def average(self, srcs: Sequence[int], divisor: int | None = None, glue: bool = False) -> int:
        return self.add("Average", srcs, (len(srcs) if divisor is None else divisor,), glue)

    def compare(self, src: int, threshold: float, cmp: str = "<=", glue: bool = False) -> int:
        return self.add("Compare", (src,), (threshold, cmp), glue)

    def branch(self, cond: int, left: int, right: int, glue: bool = False) -> int:
        return self.add("Branch", (cond, left, right), (), glue)

    def concat(self, srcs: Sequence[int], glue: bool = False) -> int:
        return self.add("Concat", srcs, (), glue)

    def pick(self, src: int, index: int, glue: bool = False) -> int:
        return self.add("Pick", (src,), (index,), glue)

    def build(self) -> ModelGraph:
        n_in = sum(1 for n in self.nodes if n.op == "Input")
        n_out = sum(1 for n in self.nodes if n.op == "Output")
        return ModelGraph(self.model_id, tuple(self.nodes), n_in, n_out)


def _apply(node: Node, args: list[Value]) -> Value:
    op = node.op
    if op == "Const":
        return node.params[0]
    if op == "Affine":
        weight, bias = node.params
        (x,) = args
        out = []
        for row, b in zip(weight, bias):
            acc = row[0] * x[0]
            for c in range(1, len(row)):
                acc = acc + row[c] * x[c]
            out.append(acc + b)
        return tuple(out)
    if op == "Relu":
        return tuple(v if v > 0.0 else 0.0 for v in args[0])
    if op in ("Add", "Average"):
        acc = list(args[0])
        for a in args[1:]:
            for j, v in enumerate(a):
                acc[j] = acc[j] + v
        if op == "Average":
            d = float(node.params[0])
            return tuple(v / d for v in acc)
        return tuple(acc)
    if op == "Mul":
        acc = list(args[0])
        for a in args[1:]:
            for j, v in enumerate(a):
                acc[j] = acc[j] * v
        return tuple(acc)
    if op == "WeightedSum":
        weights = node.params[0]
        acc = [weights[0] * v for v in args[0]]
        for w, a in zip(weights[1:], args[1:]):
            for j, v in enumerate(a):
                acc[j] = acc[j] + w * v
        return tuple(acc)
    if op == "Compare":
        threshold, cmp = node.params
        x = args[0][0]
        hit = x <= threshold if cmp == "<=" else x > threshold
        return (1.0 if hit else 0.0,)
    if op == "Branch":
        cond, left, right = args
        # both operands were already evaluated; select without short-circuit
        return left if cond[0] != 0.0 else right
    if op == "Concat":
        return tuple(v for a in args for v in a)
    if op == "Pick":
        return (args[0][node.params[0]],)
    if op == "Output":
        return args[0]
    raise MalformedGraph(f"cannot evaluate {op}")  # pragma: no cover


def evaluate(graph: ModelGraph, x: Sequence[float]) -> Value:
    if len(x) != graph.input_arity:
        raise ArityMismatch(f"{graph.model_id}: expected {graph.input_arity} inputs, got {len(x)}")
    x = tuple(float(v) for v in x)
    if not all(math.isfinite(v) for v in x):
        raise NonFiniteValue(f"{graph.model_id}: non-finite input")
    values: list[Value] = []
    out: list[float] = [0.0] * graph.output_arity
    for k, node in enumerate(graph.nodes):
        if node.op == "Input":
            v: Value = (x[node.params[0]],)
        else:
            v = _apply(node, [values[i] for i in node.inputs])
            if not all(math.isfinite(e) for e in v):
                raise NonFiniteValue(f"{graph.model_id}: node {k} ({node.op}) produced {v}")
            if node.op == "Output":
                out[node.params[0]] = v[0]
        values.append(v)
    return tuple(out)


# -- canonical encoding ------------------------------------------------------


def _graph_tuple(graph: ModelGraph) -> tuple:
    g = graph.canonical()
    nodes = tuple((n.op, n.inputs, n.params, n.glue) for n in g.nodes)
    return ("ModelGraph", g.model_id, g.input_arity, g.output_arity, nodes)


def canonical_encode(graph: ModelGraph) -> bytes:
    return encode(_graph_tuple(graph))


def decode_graph(data: bytes) -> ModelGraph:
    tag, model_id, n_in, n_out, nodes = decode(data)
    if tag != "ModelGraph":
        raise MalformedGraph(f"not a model encoding: {tag!r}")
    return ModelGraph(
        model_id,
        tuple(Node(op, ins, params, glue) for op, ins, params, glue in nodes),
        n_in,
        n_out,
    )


def hash_component(graph: ModelGraph) -> bytes:
    return sha256(canonical_encode(graph))


# -- JSON model files --------------------------------------------------------


def _params_to_json(op: str, params: tuple) -> Any:
    if op == "Const":
        return [float_to_text(v) for v in params[0]]
    if op == "Affine":
        weight, bias = params
        return {
            "weight": [[float_to_text(v) for v in row] for row in weight],
            "bias": [float_to_text(v) for v in bias],
        }
    if op == "WeightedSum":
        return [float_to_text(v) for v in params[0]]
    if op == "Compare":
        return {"threshold": float_to_text(params[0]), "cmp": params[1]}
    if params:
        return params[0]
    return None


def _params_from_json(op: str, raw: Any) -> tuple:
    if op == "Const":
        return (tuple(text_to_float(v) for v in raw),)
    if op == "Affine":
        return (
            tuple(tuple(text_to_float(v) for v in row) for row in raw["weight"]),
            tuple(text_to_float(v) for v in raw["bias"]),
        )
    if op == "WeightedSum":
        return (tuple(text_to_float(v) for v in raw),)
    if op == "Compare":
        return (text_to_float(raw["threshold"]), raw["cmp"])
    if raw is None:
        return ()
    return (raw,)


def graph_to_json(graph: ModelGraph) -> dict:
    g = graph.canonical()
    nodes = []
    for n in g.nodes:
        entry: dict[str, Any] = {"op": n.op, "inputs": list(n.inputs)}
        params = _params_to_json(n.op, n.params)
        if params is not None:
            entry["params"] = params
        if n.glue:
            entry["glue"] = True
        nodes.append(entry)
    return {
        "model_id": g.model_id,
        "input_arity": g.input_arity,
        "output_arity": g.output_arity,
        "nodes": nodes,
    }


def graph_from_json(doc: dict) -> ModelGraph:
    try:
        nodes = tuple(
            Node(n["op"], tuple(n.get("inputs", ())), _params_from_json(n["op"], n.get("params")), bool(n.get("glue", False)))
            for n in doc["nodes"]
        )
        return ModelGraph(str(doc["model_id"]), nodes, int(doc["input_arity"]), int(doc["output_arity"]))
    except (KeyError, TypeError) as exc:
        raise MalformedGraph(f"bad model document: {exc}") from exc


def dumps_graph(graph: ModelGraph) -> str:
    return json.dumps(graph_to_json(graph), indent=1)


def loads_graph(text: str) -> ModelGraph:
    return graph_from_json(json.loads(text))


# -- composition ---------------------------------------------------------------


def compose(parts: Sequence[ModelGraph], model_id: str | None = None) -> ModelGraph:
    """Chain ``parts`` so each one's outputs feed the next one's inputs."""
    if not parts:
        raise ArityMismatch("nothing to compose")
    for a, b in zip(parts, parts[1:]):
        if a.output_arity != b.input_arity:
            raise ArityMismatch(
                f"{a.model_id} emits {a.output_arity} values but {b.model_id} takes {b.input_arity}"
            )
    nodes: list[Node] = []
    carried: list[int] = []  # node index feeding each value crossing the current seam
    for pos, part in enumerate(parts):
        last = pos == len(parts) - 1
        mapping: dict[int, int] = {}
        outs: dict[int, int] = {}
        for k, node in enumerate(part.nodes):
            if node.op == "Input" and pos > 0:
                mapping[k] = carried[node.params[0]]
            elif node.op == "Output" and not last:
                outs[node.params[0]] = mapping[node.inputs[0]]
            else:
                nodes.append(node.remap(mapping))
                mapping[k] = len(nodes) - 1
        if not last:
            carried = [outs[i] for i in range(part.output_arity)]
    mid = model_id if model_id is not None else "+".join(p.model_id for p in parts)
    # values a stage emitted but the next stage ignored leave dead code behind
    live = [n.op == "Output" for n in nodes]
    for k in range(len(nodes) - 1, -1, -1):
        if live[k]:
            for i in nodes[k].inputs:
                live[i] = True
    keep = [k for k, n in enumerate(nodes) if live[k] or n.op == "Input"]
    where = {old: new for new, old in enumerate(keep)}
    pruned = tuple(nodes[k].remap(where) for k in keep)
    return ModelGraph(mid, pruned, parts[0].input_arity, parts[-1].output_arity)


def _float_slots(graph: ModelGraph) -> list[tuple[int, tuple[int, ...]]]:
    """Addresses ``(node, path)`` of every float parameter in the graph."""
    slots = []
    for k, node in enumerate(graph.nodes):
        if node.op in ("Const", "WeightedSum"):
            slots += [(k, (0, j)) for j in range(len(node.params[0]))]
        elif node.op == "Affine":
            weight, bias = node.params
            slots += [(k, (0, r, c)) for r, row in enumerate(weight) for c in range(len(row))]
            slots += [(k, (1, j)) for j in range(len(bias))]
        elif node.op == "Compare":
            slots.append((k, (0,)))
    return slots


def _replace_at(params: Any, path: tuple[int, ...], value: float) -> Any:
    if not path:
        return value
    items = list(params)
    items[path[0]] = _replace_at(items[path[0]], path[1:], value)
    return tuple(items)


def _get_at(params: Any, path: tuple[int, ...]) -> Any:
    for p in path:
        params = params[p]
    return params


def flip_bit(graph: ModelGraph, rng, max_tries: int = 64) -> ModelGraph:
    """Copy of ``graph`` with one bit of one float parameter flipped.

    Flips that would produce NaN or infinity are redrawn. Graphs without float
    parameters get an extra ``Add`` of a constant in front of output 0.
    """
    slots = _float_slots(graph)
    for _ in range(max_tries if slots else 0):
        k, path = slots[rng.randrange(len(slots))]
        node = graph.nodes[k]
        old = _get_at(node.params, path)
        bits = struct.unpack(">Q", struct.pack(">d", old))[0] ^ (1 << rng.randrange(64))
        new = struct.unpack(">d", struct.pack(">Q", bits))[0]
        if not math.isfinite(new):
            continue
        nodes = list(graph.nodes)
        nodes[k] = Node(node.op, node.inputs, _replace_at(node.params, path, new), node.glue)
        return ModelGraph(graph.model_id, tuple(nodes), graph.input_arity, graph.output_arity)
    out0 = graph.output_nodes()[0]
    nodes = list(graph.nodes)
    src = nodes[out0].inputs[0]
    nodes.append(Node("Const", (), ((1.0,),)))
    nodes.append(Node("Add", (src, len(nodes) - 1)))
    nodes.append(Node("Output", (len(nodes) - 1,), nodes[out0].params, nodes[out0].glue))
    del nodes[out0]
    shift = {i: (i - 1 if i > out0 else i) for i in range(len(nodes) + 1)}
    nodes = [Node(n.op, tuple(shift[i] for i in n.inputs), n.params, n.glue) for n in nodes]
    return ModelGraph(graph.model_id, tuple(nodes), graph.input_arity, graph.output_arity)
