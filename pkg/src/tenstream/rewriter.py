"""Strictly beneficial algebraic rewriting of the tensor value graph.

The one load-bearing rewrite splits a multi-pair contraction over an
outer-product chain into a chain of small single-pair contractions,
pulling each contraction down to the factor it binds.  A rewrite is
applied only when its operation count strictly decreases and the
rewritten chain reproduces the original result-index order exactly
(there is no transpose operator to fix it up afterwards).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ir import (GraphBuilder, TensorGraph, contraction_view,
                        is_virtual_product, product_factors)

__all__ = ["RewriteCost", "cost", "factorize_contractions"]


@dataclass(frozen=True)
class RewriteCost:
    """Scalar-operation cost of a graph under the rewriter's metric.

    A contraction with reduction size r and m result elements over a
    chain of F factors costs m*r*(F-1) multiplies and m*(r-1) adds (a
    pure summation tree); an elementwise multiply costs its size.
    """

    per_node: dict[int, tuple[int, int]]
    multiplies: int
    adds: int

    @property
    def total(self) -> int:
        return self.multiplies + self.adds


def _node_cost(graph: TensorGraph, nid) -> tuple[int, int]:
    node = graph.node(nid)
    if node.op == "contract":
        view = contraction_view(graph, nid)
        m = node.size
        r = int(np.prod(view.reduction_shape)) if view.reduction_shape else 1
        return (m * r * (len(view.factors) - 1), m * (r - 1))
    if node.op == "mul":
        return (node.size, 0)
    if node.op == "add":
        return (0, node.size)
    if node.op == "product":
        # free when fused into consuming contractions
        if is_virtual_product(graph, nid):
            return (0, 0)
        return (node.size, 0)
    return (0, 0)


def cost(graph: TensorGraph) -> RewriteCost:
    per_node = {n.nid: _node_cost(graph, n.nid) for n in graph.nodes}
    return RewriteCost(
        per_node,
        multiplies=sum(m for m, _ in per_node.values()),
        adds=sum(a for _, a in per_node.values()),
    )


# ------------------------------------------------------------- factorize

def _chain_cost(stage_shapes) -> tuple[int, int]:
    """(multiplies, adds) of a list of (result_shape, reduction_size, n_factors)."""
    muls = adds = 0
    for shape, r, nf in stage_shapes:
        m = 1
        for x in shape:
            m *= x
        muls += m * r * (nf - 1)
        adds += m * (r - 1)
    return muls, adds


class _PeelPlan:
    """A candidate factorization: peel factors onto a base, one stage per
    peeled factor, contracting all pairs that bind it to what has been
    absorbed so far."""

    def __init__(self, factor_shapes, pairs, base: int):
        self.base = base
        self.factor_shapes = factor_shapes
        self.pairs = pairs
        self.stages: list[dict] = []
        self.final_positions: list[int] | None = None
        self._build()

    def _build(self):
        shapes = self.factor_shapes
        offsets = []
        total = 0
        for s in shapes:
            offsets.append(total)
            total += len(s)
        flat = [x for s in shapes for x in s]
        owner = {}
        for f, s in enumerate(shapes):
            for local in range(len(s)):
                owner[offsets[f] + local] = f

        paired = {p for pair in self.pairs for p in pair}
        # positions currently held by the running tensor, as global ids
        held = list(range(offsets[self.base],
                          offsets[self.base] + len(shapes[self.base])))
        absorbed = {self.base}
        for j in range(len(shapes)):
            if j == self.base:
                continue
            new_positions = list(range(offsets[j], offsets[j] + len(shapes[j])))
            stage_pairs = []
            for a, b in self.pairs:
                fa, fb = owner[a], owner[b]
                if fb in absorbed and fa == j:
                    a, b = b, a
                    fa, fb = fb, fa
                if fa in absorbed and fb == j:
                    stage_pairs.append((held.index(a), len(held) + (b - offsets[j])))
            merged = held + new_positions
            if stage_pairs:
                drop = {p for pair in stage_pairs for p in pair}
                red = 1
                for x, _ in stage_pairs:
                    red *= flat[merged[x]]
                kept = [g for i, g in enumerate(merged) if i not in drop]
                self.stages.append({
                    "factor": j,
                    "pairs": tuple(sorted(stage_pairs)),
                    "result_shape": tuple(flat[g] for g in kept),
                    "reduction": red,
                })
                held = kept
            else:
                # pure outer-product extension, no contraction stage
                self.stages.append({"factor": j, "pairs": (), "result_shape": None,
                                    "reduction": 1})
                held = merged
            absorbed.add(j)
        self.final_positions = held
        self.expected = [p for p in range(total) if p not in paired]

    @property
    def order_ok(self) -> bool:
        return self.final_positions == self.expected

    def stage_costs(self):
        return [(st["result_shape"], st["reduction"], 2)
                for st in self.stages if st["pairs"]]

    @property
    def largest_intermediate(self) -> int:
        best = 0
        for st in self.stages:
            if st["pairs"]:
                m = 1
                for x in st["result_shape"]:
                    m *= x
                best = max(best, m)
        return best


def _plan_for(graph: TensorGraph, nid: int) -> _PeelPlan | None:
    """Best valid peel plan for a contraction node, or None."""
    node = graph.node(nid)
    factors = product_factors(graph, node.args[0])
    if len(factors) < 2:
        return None
    shapes = [graph.node(f).shape for f in factors]

    offsets = []
    total = 0
    for s in shapes:
        offsets.append(total)
        total += len(s)
    owner = {}
    for f, s in enumerate(shapes):
        for local in range(len(s)):
            owner[offsets[f] + local] = f
    # intra-factor traces are not peelable; leave such nodes alone
    for a, b in node.pairs:
        if owner[a] == owner[b]:
            return None

    old_m, old_a = _node_cost(graph, nid)
    candidates = []
    pair_count = [0] * len(factors)
    for a, b in node.pairs:
        pair_count[owner[a]] += 1
        pair_count[owner[b]] += 1
    bases = sorted(range(len(factors)), key=lambda f: (-pair_count[f], f))
    for base in bases:
        plan = _PeelPlan(shapes, node.pairs, base)
        if not plan.order_ok:
            continue
        muls, adds = _chain_cost(plan.stage_costs())
        if muls + adds < old_m + old_a:
            candidates.append((muls + adds, plan.largest_intermediate, base, plan))
    if not candidates:
        return None
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    return candidates[0][3]


def factorize_contractions(graph: TensorGraph) -> TensorGraph:
    """Factorize every profitable contraction; returns a new graph (the
    input graph when no rewrite applies).  Dead nodes are pruned."""
    plans = {}
    for node in graph.nodes:
        if node.op == "contract":
            plan = _plan_for(graph, node.nid)
            if plan is not None:
                plans[node.nid] = plan
    if not plans:
        return graph

    b = GraphBuilder()
    mapping: dict[int, int] = {}

    def rebuild(nid: int) -> int:
        if nid in mapping:
            return mapping[nid]
        node = graph.node(nid)
        if node.nid in plans:
            plan = plans[node.nid]
            factors = product_factors(graph, node.args[0])
            new_factors = [rebuild(f) for f in factors]
            x = new_factors[plan.base]
            for st in plan.stages:
                x = b.product(x, new_factors[st["factor"]], stmt=node.stmt)
                if st["pairs"]:
                    x = b.contract(x, st["pairs"], stmt=node.stmt)
            mapping[nid] = x
            return x
        args = tuple(rebuild(a) for a in node.args)
        if node.op == "input":
            out = b.input(node.name, node.shape, stmt=node.stmt)
        elif node.op == "product":
            out = b.product(*args, stmt=node.stmt)
        elif node.op == "contract":
            out = b.contract(args[0], node.pairs, stmt=node.stmt)
        elif node.op in ("mul", "add"):
            out = b.elem(node.op, *args, stmt=node.stmt)
        elif node.op == "output":
            out = b.output(node.name, args[0], stmt=node.stmt)
        else:
            raise AssertionError(node.op)
        mapping[nid] = out
        return out

    for node in graph.outputs():
        rebuild(node.nid)
    for name, nid in graph.values.items():
        if nid in mapping:
            b.graph.values[name] = mapping[nid]

    out = _prune(b.graph)
    out.validate()
    return out


def _prune(graph: TensorGraph) -> TensorGraph:
    """Drop nodes unreachable from the outputs, keeping topo order."""
    live = set()
    stack = [n.nid for n in graph.outputs()]
    while stack:
        nid = stack.pop()
        if nid in live:
            continue
        live.add(nid)
        stack.extend(graph.node(nid).args)
    if len(live) == len(graph.nodes):
        return graph
    remap = {}
    out = TensorGraph()
    for node in graph.nodes:
        if node.nid not in live:
            continue
        new_id = len(out.nodes)
        remap[node.nid] = new_id
        out.nodes.append(type(node)(
            new_id, node.op, tuple(remap[a] for a in node.args),
            node.shape, node.pairs, node.name, node.stmt))
    out.values = {k: remap[v] for k, v in graph.values.items() if v in remap}
    return out
