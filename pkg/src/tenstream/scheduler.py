"""Partition the tensor value graph into pipelined operator groups.

Each group becomes one streaming loop-nest module; groups communicate
over FIFOs.  The atomized schedule has one group per tensor value;
collapsing merges chain-adjacent groups.  Without an explicit budget the
collapse merges the nests belonging to one source statement, which is
the natural division of the kernel (a contraction chain per statement,
plus the elementwise stage).  Stage ordering is as-late-as-possible.

Outer-product nodes that feed a contraction are virtual: they cost
nothing and are fused into the consuming nest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_ir import TensorGraph, contraction_view, is_virtual_product

__all__ = [
    "Group", "StreamEdge", "GroupSchedule", "GroupBudget", "SchedulerError",
    "atomize", "collapse", "alap_order", "estimate_interval", "partition",
]


class SchedulerError(Exception):
    pass


@dataclass(frozen=True)
class Group:
    gid: int
    name: str
    members: tuple[int, ...]   # material node ids, topologically ordered
    kind: str = "compute"      # compute | copy


@dataclass(frozen=True)
class StreamEdge:
    producer: int | None   # group id, None = external input feed
    consumer: int | None   # group id, None = external output drain
    tensor: int            # node id of the streamed value
    words: int


@dataclass
class GroupSchedule:
    graph: TensorGraph
    groups: list[Group]
    stream_edges: list[StreamEdge]
    stage_order: tuple[int, ...]
    scalar_bits: int = 64

    def group(self, gid: int) -> Group:
        return self.groups[gid]

    def group_of(self, nid: int) -> int | None:
        for g in self.groups:
            if nid in g.members:
                return g.gid
        return None

    def by_name(self, name: str) -> Group:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def intervals(self) -> dict[int, int]:
        return {g.gid: estimate_interval(g, self.graph) for g in self.groups}

    def dump(self) -> str:
        """Text table: group | members | interval | streams-in | streams-out."""
        lines = ["group | members | interval | streams-in | streams-out"]
        for gid in self.stage_order:
            g = self.group(gid)
            ins = sorted(e.tensor for e in self.stream_edges if e.consumer == gid)
            outs = sorted(e.tensor for e in self.stream_edges if e.producer == gid)
            lines.append(
                f"{g.name} | {','.join(map(str, g.members))} | "
                f"{estimate_interval(g, self.graph)} | "
                f"{','.join(map(str, ins))} | {','.join(map(str, outs))}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GroupBudget:
    max_plm_bits: int | None = None
    max_dsp: int | None = None
    target_interval_cycles: int | None = None


# ------------------------------------------------------- material nodes

def material_nodes(graph: TensorGraph) -> list[int]:
    """Nodes that become loop nests: contractions, elementwise ops,
    outer products not absorbed by a contraction, and pass-through
    copies for outputs wired straight to inputs."""
    mat = []
    for n in graph.nodes:
        if n.op in ("contract", "mul", "add"):
            mat.append(n.nid)
        elif n.op == "product":
            if not is_virtual_product(graph, n.nid):
                mat.append(n.nid)
        elif n.op == "output" and graph.node(n.args[0]).op == "input":
            mat.append(n.nid)
    return mat


def node_trips(graph: TensorGraph, nid: int) -> int:
    """Trip count of the loop nest implementing one node."""
    node = graph.node(nid)
    if node.op == "contract":
        view = contraction_view(graph, nid)
        red = int(np.prod(view.reduction_shape)) if view.reduction_shape else 1
        return node.size * red
    return node.size


def node_operators(graph: TensorGraph, nid: int) -> tuple[int, int]:
    """(multipliers, adders) instantiated for one nest; contraction
    nests unroll the innermost reduction loop."""
    node = graph.node(nid)
    if node.op == "contract":
        view = contraction_view(graph, nid)
        unroll = view.reduction_shape[-1] if view.reduction_shape else 1
        return (unroll, unroll)
    if node.op in ("mul", "product"):
        return (1, 0)
    if node.op == "add":
        return (0, 1)
    return (0, 0)


def group_inputs(graph: TensorGraph, members: tuple[int, ...]) -> list[int]:
    """Distinct tensors the group reads from outside itself, in first-use
    order.  Virtual products are resolved to their factors."""
    mset = set(members)
    seen: list[int] = []

    def operands(nid: int) -> list[int]:
        node = graph.node(nid)
        if node.op == "contract":
            return list(contraction_view(graph, nid).factors)
        return list(node.args)

    for nid in members:
        for op in operands(nid):
            if op not in mset and op not in seen:
                seen.append(op)
    return seen


def real_consumers(graph: TensorGraph, nid: int) -> list[int]:
    """Consuming nodes with virtual products resolved to their
    contractions."""
    out = []
    for c in graph.consumers(nid):
        if is_virtual_product(graph, c.nid):
            out.extend(real_consumers(graph, c.nid))
        else:
            out.append(c.nid)
    return out


def group_internal(graph: TensorGraph, members: tuple[int, ...]) -> list[int]:
    """Members whose value is consumed by a later member of the group."""
    mset = set(members)
    internal = []
    for nid in members:
        if any(c in mset and c != nid for c in real_consumers(graph, nid)):
            internal.append(nid)
    return internal


def group_buffer_bits(graph: TensorGraph, members: tuple[int, ...],
                      scalar_bits: int) -> int:
    """Planning estimate: every distinct external input is buffered at
    full size, plus internally produced-and-consumed intermediates."""
    words = sum(graph.node(t).size for t in group_inputs(graph, members))
    words += sum(graph.node(t).size for t in group_internal(graph, members))
    return words * scalar_bits


def estimate_interval(group: Group, graph: TensorGraph) -> int:
    """Cycle interval of a group: sum of its child loop trip counts."""
    return sum(node_trips(graph, nid) for nid in group.members)


def group_dsp(graph: TensorGraph, members: tuple[int, ...]) -> int:
    """Conservative multiplier demand: one set per nest, no sharing."""
    return sum(node_operators(graph, nid)[0] for nid in members)


# ------------------------------------------------------------ build

def _flavor(graph: TensorGraph, nid: int) -> str:
    node = graph.node(nid)
    if node.op == "mul":
        return "mmult"
    if node.op == "add":
        return "madd"
    if node.op == "product":
        return "prod"
    if node.op == "output":
        return "copy"
    view = contraction_view(graph, nid)
    matrix_bindings = []
    for f, tags in enumerate(view.factor_axes):
        if len(tags) == 2:
            bound = {i for i, (kind, _) in enumerate(tags) if kind == "k"}
            if bound:
                matrix_bindings.append(bound)
    if len(matrix_bindings) == 1:
        if matrix_bindings[0] == {1}:
            return "gemm"
        if matrix_bindings[0] == {0}:
            return "gemm_inv"
    return "contract"


def _name_groups(graph: TensorGraph, parts: list[tuple[int, ...]],
                 order: list[int]) -> list[str]:
    names = [""] * len(parts)
    used: dict[str, int] = {}
    for gid in order:
        flavors = {_flavor(graph, nid) for nid in parts[gid]}
        base = flavors.pop() if len(flavors) == 1 else "block"
        n = used.get(base, 0)
        used[base] = n + 1
        names[gid] = base if n == 0 else f"{base}_{n + 1}"
    return names


def _build(graph: TensorGraph, parts: list[tuple[int, ...]],
           scalar_bits: int) -> GroupSchedule:
    owner: dict[int, int] = {}
    for gid, members in enumerate(parts):
        for nid in members:
            if nid in owner:
                raise SchedulerError(f"node {nid} in two groups")
            owner[nid] = gid

    def resolve(nid: int) -> int | None:
        """Owning group of a value, looking through virtual products."""
        return owner.get(nid)

    edges: list[StreamEdge] = []
    seen: set[tuple] = set()

    def add_edge(prod, cons, tensor):
        key = (prod, cons, tensor)
        if key not in seen:
            seen.add(key)
            edges.append(StreamEdge(prod, cons, tensor, graph.node(tensor).size))

    for gid, members in enumerate(parts):
        for t in group_inputs(graph, members):
            node = graph.node(t)
            if node.op == "product" and t not in owner:
                # virtual product read directly: stream its factors
                continue
            add_edge(resolve(t), gid, t)
    for out in graph.outputs():
        src = out.args[0]
        if out.nid in owner:   # pass-through copy group
            add_edge(resolve(src), owner[out.nid], src)
            add_edge(owner[out.nid], None, out.nid)
        else:
            add_edge(resolve(src), None, src)

    # quotient graph over groups
    succ: dict[int, set[int]] = {gid: set() for gid in range(len(parts))}
    pred: dict[int, set[int]] = {gid: set() for gid in range(len(parts))}
    for e in edges:
        if e.producer is not None and e.consumer is not None:
            succ[e.producer].add(e.consumer)
            pred[e.consumer].add(e.producer)

    order = alap_order_ids(succ, pred)
    names = _name_groups(graph, parts, order)
    groups = [Group(gid, names[gid], members,
                    "copy" if any(graph.node(n).op == "output" for n in members)
                    else "compute")
              for gid, members in enumerate(parts)]
    return GroupSchedule(graph, groups, edges, tuple(order), scalar_bits)


def alap_order_ids(succ: dict[int, set[int]], pred: dict[int, set[int]]) -> list[int]:
    """ALAP topological order: every group as late as its consumers allow,
    ties broken by group id.  Raises on cycles."""
    depth: dict[int, int] = {}

    def visit(g, stack):
        if g in depth:
            if depth[g] == -1:
                raise SchedulerError("cycle in group quotient graph")
            return depth[g]
        depth[g] = -1
        d = 1 + max((visit(s, stack) for s in succ[g]), default=0)
        depth[g] = d
        return d

    for g in succ:
        visit(g, [])
    order = sorted(succ, key=lambda g: (-depth[g], g))
    for g in order:
        for s in succ[g]:
            assert order.index(g) < order.index(s)
    return order


def atomize(graph: TensorGraph, scalar_bits: int = 64) -> GroupSchedule:
    """Smallest possible operators: one group per tensor value."""
    parts = [(nid,) for nid in material_nodes(graph)]
    return _build(graph, parts, scalar_bits)


def alap_order(schedule: GroupSchedule) -> list[Group]:
    """Stage list in ALAP order."""
    return [schedule.group(g) for g in schedule.stage_order]


# ------------------------------------------------------------- collapse

def _statement_parts(schedule: GroupSchedule) -> list[tuple[int, ...]]:
    graph = schedule.graph
    atoms = [schedule.group(g).members[0] for g in schedule.stage_order]
    parts: list[list[int]] = []
    tags: list[str | None] = []
    for nid in atoms:
        stmt = graph.node(nid).stmt
        if parts and stmt is not None and tags[-1] == stmt:
            parts[-1].append(nid)
        else:
            parts.append([nid])
            tags.append(stmt)
    return [tuple(sorted(p)) for p in parts]


def collapse(schedule: GroupSchedule, budget: GroupBudget | None = None) -> GroupSchedule:
    """Merge chain-adjacent groups.

    With no budget, nests from the same source statement form one group
    (the natural operator division of the kernel).  With a budget,
    chain pairs are merged greedily, cheapest merged interval first,
    while the merged group respects the PLM/DSP/interval limits.
    """
    graph = schedule.graph
    if budget is None:
        return _build(graph, _statement_parts(schedule), schedule.scalar_bits)

    parts = [list(g.members) for g in schedule.groups]

    def edges_for(parts_now):
        succ = {i: set() for i in range(len(parts_now))}
        pred = {i: set() for i in range(len(parts_now))}
        owner = {}
        for i, members in enumerate(parts_now):
            for nid in members:
                owner[nid] = i
        for i, members in enumerate(parts_now):
            for t in group_inputs(graph, tuple(members)):
                j = owner.get(t)
                if j is not None and j != i:
                    succ[j].add(i)
                    pred[i].add(j)
        return succ, pred

    while True:
        succ, pred = edges_for(parts)
        best = None
        for a in range(len(parts)):
            if len(succ[a]) != 1:
                continue
            (b,) = succ[a]
            if len(pred[b]) != 1:
                continue
            members = tuple(sorted(parts[a] + parts[b]))
            interval = sum(node_trips(graph, n) for n in members)
            if budget.target_interval_cycles is not None and \
                    interval > budget.target_interval_cycles:
                continue
            if budget.max_plm_bits is not None and \
                    group_buffer_bits(graph, members, schedule.scalar_bits) > budget.max_plm_bits:
                continue
            if budget.max_dsp is not None and \
                    group_dsp(graph, members) > budget.max_dsp:
                continue
            key = (interval, a, b)
            if best is None or key < best:
                best = key
        if best is None:
            break
        _, a, b = best
        parts[a] = sorted(parts[a] + parts[b])
        del parts[b]

    return _build(graph, [tuple(p) for p in parts], schedule.scalar_bits)


def partition(graph: TensorGraph, n_groups: int | None = None,
              scalar_bits: int = 64) -> GroupSchedule:
    """Schedule with a requested number of compute groups.

    None picks the statement-level grouping.  1..#statements merges the
    trailing statement groups; anything at or above the nest count is
    the atomized schedule; in between, the largest statement groups are
    split nest by nest.
    """
    atoms = atomize(graph, scalar_bits)
    if n_groups is None:
        return collapse(atoms)
    if n_groups < 1:
        raise ValueError("n_groups must be >= 1")
    if n_groups >= len(atoms.groups):
        return atoms

    stmt_sched = collapse(atoms)
    parts = [list(stmt_sched.group(g).members) for g in stmt_sched.stage_order]
    if n_groups <= len(parts):
        while len(parts) > n_groups:
            tail = parts.pop()
            parts[-1] = sorted(parts[-1] + tail)
    else:
        while len(parts) < n_groups:
            sizes = [(len(p), -i) for i, p in enumerate(parts)]
            _, neg_i = max(sizes)
            i = -neg_i
            head = parts[i][0]
            parts[i] = parts[i][1:]
            parts.insert(i, [head])
    return _build(graph, [tuple(p) for p in parts], scalar_bits)
