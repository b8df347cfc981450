"""Seeded generators for the model families the marketplace hosts.

Each function returns a :class:`ModelGraph` built only from IR primitives:
descriptive formulas, feed-forward networks, decision trees, ensembles, and
generic sequential chains.
"""

from __future__ import annotations

import random
from typing import Sequence

from .model_ir import GraphBuilder, ModelGraph


def _weight(rng: random.Random) -> float:
    return rng.uniform(-1.0, 1.0)


def identity(width: int = 1, model_id: str = "identity") -> ModelGraph:
    b = GraphBuilder(model_id)
    b.outputs(b.inputs(width))
    return b.build()


def credit_formula(
    k: int,
    n_features: int,
    rng: random.Random,
    model_id: str = "credit",
    metric_weights: Sequence[float] | None = None,
) -> ModelGraph:
    """Risk score as a weighted sum of ``k`` metrics over customer features.

    Metrics alternate between linear scores over a feature subset and
    pairwise interactions, so each metric is one pipeline stage and the
    combining formula is another.
    """
    if k < 1 or n_features < 2:
        raise ValueError("need at least one metric and two features")
    b = GraphBuilder(model_id)
    xs = b.inputs(n_features)
    metrics = []
    for j in range(k):
        if j % 2 == 0:
            chosen = sorted(rng.sample(range(n_features), rng.randint(2, n_features)))
            src = b.concat([xs[i] for i in chosen])
            metrics.append(b.affine(src, [[_weight(rng) for _ in chosen]], [_weight(rng)]))
        else:
            a, c = rng.sample(range(n_features), 2)
            metrics.append(b.mul([xs[a], xs[c]]))
    weights = list(metric_weights) if metric_weights is not None else [_weight(rng) for _ in range(k)]
    b.output(b.weighted_sum(metrics, weights))
    return b.build()


def mlp(widths: Sequence[int], rng: random.Random, model_id: str = "mlp") -> ModelGraph:
    """Feed-forward network; every layer but the last is followed by ReLU."""
    if len(widths) < 2:
        raise ValueError("need input and output widths")
    b = GraphBuilder(model_id)
    xs = b.inputs(widths[0])
    h = b.concat(xs)
    n_layers = len(widths) - 1
    for layer in range(n_layers):
        fan_in, fan_out = widths[layer], widths[layer + 1]
        h = b.affine(
            h,
            [[_weight(rng) for _ in range(fan_in)] for _ in range(fan_out)],
            [_weight(rng) for _ in range(fan_out)],
        )
        if layer < n_layers - 1:
            h = b.relu(h)
    _emit(b, h, widths[-1])
    return b.build()


def _emit(b: GraphBuilder, src: int, width: int) -> None:
    if width == 1:
        b.output(src)
    else:
        b.outputs(b.pick(src, j) for j in range(width))


def _tree(
    b: GraphBuilder,
    xs: list[int],
    depth: int,
    rng: random.Random,
    leaf_width: int,
    p_leaf: float,
    top: bool,
) -> int:
    if depth == 0 or (not top and rng.random() < p_leaf):
        return b.const([rng.uniform(-5.0, 5.0) for _ in range(leaf_width)])
    feature = rng.randrange(len(xs))
    cond = b.compare(xs[feature], round(rng.uniform(-1.0, 1.0), 3), rng.choice(("<=", ">")))
    left = _tree(b, xs, depth - 1, rng, leaf_width, p_leaf, False)
    right = _tree(b, xs, depth - 1, rng, leaf_width, p_leaf, False)
    return b.branch(cond, left, right)


def decision_tree(
    depth: int,
    n_features: int,
    rng: random.Random,
    model_id: str = "tree",
    leaf_width: int = 1,
    p_leaf: float = 0.0,
) -> ModelGraph:
    """Binary decision tree; ``p_leaf`` > 0 yields irregular shapes."""
    b = GraphBuilder(model_id)
    xs = b.inputs(n_features)
    root = _tree(b, xs, depth, rng, leaf_width, p_leaf, True)
    _emit(b, root, leaf_width)
    return b.build()


def ensemble(
    m: int,
    n_features: int,
    rng: random.Random,
    model_id: str = "ensemble",
    combiner: str = "average",
    weak: str = "mixed",
    out_width: int = 1,
) -> ModelGraph:
    """``m`` weak learners over shared inputs, merged by Average or WeightedSum."""
    b = GraphBuilder(model_id)
    xs = b.inputs(n_features)
    roots = []
    for j in range(m):
        kind = weak if weak != "mixed" else ("linear", "tree", "mlp")[j % 3]
        if kind == "linear":
            roots.append(b.affine(b.concat(xs), [[_weight(rng) for _ in xs] for _ in range(out_width)], [_weight(rng) for _ in range(out_width)]))
        elif kind == "tree":
            roots.append(_tree(b, xs, rng.randint(1, 3), rng, out_width, 0.2, True))
        elif kind == "mlp":
            hidden = rng.randint(2, 4)
            h = b.relu(b.affine(b.concat(xs), [[_weight(rng) for _ in xs] for _ in range(hidden)], [_weight(rng) for _ in range(hidden)]))
            roots.append(b.affine(h, [[_weight(rng) for _ in range(hidden)] for _ in range(out_width)], [_weight(rng) for _ in range(out_width)]))
        elif kind == "const":
            roots.append(b.const([rng.uniform(-3.0, 3.0) for _ in range(out_width)]))
        else:
            raise ValueError(f"unknown weak learner kind {kind!r}")
    if combiner == "average":
        top = b.average(roots)
    elif combiner == "weighted":
        top = b.weighted_sum(roots, [_weight(rng) for _ in roots])
    else:
        raise ValueError(f"unknown combiner {combiner!r}")
    _emit(b, top, out_width)
    return b.build()


def const_ensemble(values: Sequence[float], n_features: int = 1, model_id: str = "const-ensemble") -> ModelGraph:
    b = GraphBuilder(model_id)
    b.inputs(n_features)
    roots = [b.const([v]) for v in values]
    b.output(b.average(roots))
    return b.build()


def random_chain(stages: int, width: int, rng: random.Random, model_id: str = "chain") -> ModelGraph:
    """Sequential program of ``stages`` vector transformations."""
    b = GraphBuilder(model_id)
    xs = b.inputs(width)
    h = b.concat(xs)
    for s in range(stages):
        kind = rng.choice(("affine", "relu", "add", "mul", "wsum")) if s else "affine"
        if kind == "affine":
            h = b.affine(h, [[_weight(rng) for _ in range(width)] for _ in range(width)], [_weight(rng) for _ in range(width)])
        elif kind == "relu":
            h = b.relu(h)
        elif kind == "add":
            h = b.add_([h, b.const([_weight(rng) for _ in range(width)])])
        elif kind == "mul":
            h = b.mul([h, b.const([_weight(rng) for _ in range(width)])])
        else:
            h = b.weighted_sum([h, b.const([_weight(rng) for _ in range(width)])], [_weight(rng), _weight(rng)])
    _emit(b, h, width)
    return b.build()
