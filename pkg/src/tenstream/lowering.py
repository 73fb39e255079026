"""Lower operator groups to streaming loop nests and execute or emit them.

Each group becomes a module that (1) copies stream inputs it reuses into
local buffers, forwarding shared tensors to the next consumer, (2) runs
one perfectly nested loop per member value with result indices outer and
reduction indices inner, and (3) writes results to the outgoing stream
in lexicographic order.  Because every producer writes lexicographically
and elementwise consumers read the same way, an in-order pipeline needs
no minimum FIFO depth beyond one element.

A value consumed exactly once, in order, by an elementwise nest is read
straight from the stream without a local buffer.

The dataflow interpreter executes the lowered design either sequentially
(full-size FIFOs, vectorized) or as stepped communicating processes with
bounded FIFOs, deadlock detection, and an occupancy trace.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .formats import Fixed, Float32, Float64, CustomFloat, ScalarFormat
from .scheduler import GroupSchedule, group_inputs
from .tensor_ir import TensorGraph, contraction_view, _make_eval

__all__ = [
    "LoopNest", "LocalBuffer", "GroupImpl", "KernelImpl",
    "CompatibilityGraph", "DeadlockError",
    "lower_schedule", "lower_group", "liveness", "emit_c", "execute_kernel",
    "min_safe_fifo_depths", "RUNTIME_HEADER_NAME",
]

RUNTIME_HEADER_NAME = "stream_rt.h"


class LoweringError(Exception):
    pass


class DeadlockError(RuntimeError):
    def __init__(self, blocked):
        self.blocked = blocked  # list of (group name, "read"/"write", stream)
        desc = "; ".join(f"{g} waits to {d} {s}" for g, d, s in blocked)
        super().__init__(f"dataflow deadlock: {desc}")


@dataclass(frozen=True)
class Operand:
    kind: str                     # buffer | stream
    name: str
    axes: tuple[int, ...] = ()    # loop-frame axis per tensor dim (buffer)
    shape: tuple[int, ...] = ()


@dataclass
class LoopNest:
    """One perfectly nested loop; addresses are row-major, affine in the
    loop indices."""

    node: int                     # graph node id, -1 for copies
    kind: str                     # contract | mul | add | product | copy
    loops: tuple[tuple[str, int], ...]
    n_result: int                 # leading loops produce output positions
    factors: tuple[Operand, ...]
    out: Operand
    forward: str | None = None    # copy nests may tee into this stream


@dataclass
class LocalBuffer:
    name: str
    words: int
    tensor: int
    first_write: int = -1
    last_read: int = -1


@dataclass
class GroupImpl:
    gid: int
    name: str
    nests: list[LoopNest]
    buffers: dict[str, LocalBuffer]
    corrupt: bool = False         # test hook: perturb this group's output


@dataclass(frozen=True)
class StreamInfo:
    name: str
    tensor: int
    words: int
    producer: int | None
    consumer: int | None


@dataclass
class KernelImpl:
    schedule: GroupSchedule
    fmt: ScalarFormat
    groups: list[GroupImpl]                   # stage order
    streams: dict[str, StreamInfo]
    input_feeds: list[tuple[str, str]]        # (tensor name, stream)
    output_drains: list[tuple[str, str]]      # (output name, stream)

    @property
    def graph(self) -> TensorGraph:
        return self.schedule.graph


# ----------------------------------------------------------------- labels

def value_label(graph: TensorGraph, nid: int) -> str:
    node = graph.node(nid)
    if node.name:
        return node.name
    for name, v in graph.values.items():
        if v == nid:
            return name
    return f"v{nid}"


# ------------------------------------------------------------ lowering

def _consumer_chain(schedule: GroupSchedule):
    """Per tensor: producer group and consumers in stage order (None for
    the external drain, always last)."""
    pos = {g: i for i, g in enumerate(schedule.stage_order)}
    chains: dict[int, dict] = {}
    for e in schedule.stream_edges:
        c = chains.setdefault(e.tensor, {"producer": None, "consumers": []})
        if e.producer is not None:
            c["producer"] = e.producer
        c["consumers"].append(e.consumer)
    for c in chains.values():
        c["consumers"].sort(key=lambda g: (pos[g], g) if g is not None else (len(pos), 0))
    return chains


def _seg_name(graph, tensor, k):
    return f"{value_label(graph, tensor)}_s{k}"


def lower_schedule(schedule: GroupSchedule, fmt: ScalarFormat) -> KernelImpl:
    graph = schedule.graph
    chains = _consumer_chain(schedule)

    streams: dict[str, StreamInfo] = {}
    for tensor, c in chains.items():
        prev = c["producer"]
        for k, cons in enumerate(c["consumers"]):
            name = _seg_name(graph, tensor, k)
            streams[name] = StreamInfo(name, tensor, graph.node(tensor).size,
                                       prev, cons)
            prev = cons

    emit_rank: dict[tuple[int, int], int] = {}
    impls = [lower_group(schedule.group(g), schedule, chains, fmt, emit_rank)
             for g in schedule.stage_order]

    input_feeds = []
    for node in graph.inputs():
        if node.nid in chains:
            input_feeds.append((node.name, _seg_name(graph, node.nid, 0)))
    output_drains = []
    for out in graph.outputs():
        tensor = out.nid if out.nid in chains else out.args[0]
        c = chains[tensor]
        k = c["consumers"].index(None)
        output_drains.append((out.name, _seg_name(graph, tensor, k)))

    return KernelImpl(schedule, fmt, impls, streams, input_feeds, output_drains)


def lower_group(group, schedule: GroupSchedule, chains, fmt: ScalarFormat,
                emit_rank: dict | None = None) -> GroupImpl:
    """Implement one group as copy-in nests plus one compute nest per
    member value.

    emit_rank records, per (group, tensor), the step at which the group
    emits that tensor downstream; consumers order their copy-ins by it
    so bounded FIFOs cannot deadlock an in-order pipeline.
    """
    if emit_rank is None:
        emit_rank = {}
    graph = schedule.graph
    members = group.members
    mset = set(members)
    gid = group.gid

    if group.kind == "copy":
        out_node = graph.node(members[0])
        src = out_node.args[0]
        pos = chains[src]["consumers"].index(gid)
        in_stream = _seg_name(graph, src, pos)
        fwd = _fwd_stream(graph, chains, src, gid)
        out_stream = _seg_name(graph, members[0], 0)
        nest = LoopNest(members[0], "copy",
                        ((f"i", out_node.size),), 1,
                        (Operand("stream", in_stream),),
                        Operand("stream", out_stream), forward=fwd)
        if fwd:
            emit_rank[(gid, src)] = 0
        emit_rank[(gid, members[0])] = 0
        return GroupImpl(gid, group.name, [nest], {})

    # how often each external tensor is referenced by the member nests
    uses: dict[int, int] = {}
    member_ops: dict[int, list[int]] = {}
    for nid in members:
        node = graph.node(nid)
        if node.op == "contract":
            ops = list(contraction_view(graph, nid).factors)
        else:
            ops = list(node.args)
        member_ops[nid] = ops
        for t in ops:
            if t not in mset:
                uses[t] = uses.get(t, 0) + 1

    buffers: dict[str, LocalBuffer] = {}
    nests: list[LoopNest] = []
    stream_direct: dict[int, str] = {}

    def ext_in_stream(t):
        pos = chains[t]["consumers"].index(gid)
        return _seg_name(graph, t, pos)

    # Copy-ins run in upstream emission order: a tensor forwarded early by
    # an earlier stage must be drained before one that stage computes
    # later, or a bounded forward FIFO deadlocks the pipeline.
    stage_pos = {g: i for i, g in enumerate(schedule.stage_order)}

    def arrival(t) -> tuple[int, int]:
        cons = chains[t]["consumers"]
        k = cons.index(gid)
        upstream = chains[t]["producer"] if k == 0 else cons[k - 1]
        if upstream is None:
            return (-1, 0)
        return (stage_pos[upstream], emit_rank.get((upstream, t), 1 << 20))

    copyins = []
    forwarded: list[int] = []
    for use_order, t in enumerate(group_inputs(graph, members)):
        node = graph.node(t)
        fwd = _fwd_stream(graph, chains, t, gid)
        direct = (uses[t] == 1 and fwd is None
                  and all(graph.node(m).op in ("mul", "add")
                          for m in members if t in member_ops[m]))
        if direct:
            stream_direct[t] = ext_in_stream(t)
            continue
        buf = value_label(graph, t)
        buffers[buf] = LocalBuffer(buf, node.size, t)
        nest = LoopNest(-1, "copy", (("i", node.size),), 1,
                        (Operand("stream", ext_in_stream(t)),),
                        Operand("buffer", buf, (0,), (node.size,)),
                        forward=fwd)
        copyins.append((arrival(t) + (use_order,), nest, t, fwd))
    copyins.sort(key=lambda x: x[0])
    for step, (_, nest, t, fwd) in enumerate(copyins):
        nests.append(nest)
        if fwd:
            emit_rank[(gid, t)] = step

    produced_stream: set[int] = set()
    for nid in members:
        node = graph.node(nid)
        internal_consumers = [c for c in _real_consumers(graph, nid) if c in mset]
        is_group_output = nid in chains and chains[nid]["producer"] == gid

        def operand_for(t, axes, shape):
            if t in mset or value_label(graph, t) in buffers:
                return Operand("buffer", value_label(graph, t), axes, shape)
            if t in stream_direct:
                return Operand("stream", stream_direct[t], (), shape)
            raise LoweringError(f"operand {t} of node {nid} has no source")

        if node.op == "contract":
            view = contraction_view(graph, nid)
            n_res = len(view.result_shape)
            loops = tuple([(f"r{i}", x) for i, x in enumerate(view.result_shape)]
                          + [(f"k{i}", x) for i, x in enumerate(view.reduction_shape)])
            factors = []
            for f, fnid in enumerate(view.factors):
                axes = tuple(i if kind == "r" else n_res + i
                             for kind, i in view.factor_axes[f])
                factors.append(operand_for(fnid, axes, graph.node(fnid).shape))
            kind = "contract"
        elif node.op in ("mul", "add"):
            n_res = len(node.shape)
            loops = tuple((f"i{i}", x) for i, x in enumerate(node.shape))
            ident = tuple(range(n_res))
            factors = [operand_for(t, ident, node.shape) for t in node.args]
            kind = node.op
        elif node.op == "product":
            n_res = len(node.shape)
            loops = tuple((f"i{i}", x) for i, x in enumerate(node.shape))
            a, b = node.args
            ra = len(graph.node(a).shape)
            factors = [operand_for(a, tuple(range(ra)), graph.node(a).shape),
                       operand_for(b, tuple(range(ra, n_res)), graph.node(b).shape)]
            kind = "product"
        else:
            raise AssertionError(node.op)

        if internal_consumers:
            buf = value_label(graph, nid)
            buffers[buf] = LocalBuffer(buf, node.size, nid)
            out = Operand("buffer", buf, tuple(range(n_res)), node.shape)
            nests.append(LoopNest(nid, kind, loops, n_res, tuple(factors), out))
            if is_group_output:
                nests.append(LoopNest(nid, "copy", (("i", node.size),), 1,
                                      (Operand("buffer", buf, (0,), (node.size,)),),
                                      Operand("stream", _seg_name(graph, nid, 0))))
        else:
            out = Operand("stream", _seg_name(graph, nid, 0)) if is_group_output \
                else Operand("buffer", value_label(graph, nid),
                             tuple(range(n_res)), node.shape)
            if not is_group_output:
                # value is computed but never used downstream; keep it local
                buf = value_label(graph, nid)
                buffers[buf] = LocalBuffer(buf, node.size, nid)
            nests.append(LoopNest(nid, kind, loops, n_res, tuple(factors), out))

    for idx, nest in enumerate(nests):
        if nest.out.kind == "stream" and nest.node >= 0:
            emit_rank.setdefault((gid, nest.node), (1 << 19) + idx)
    return GroupImpl(gid, group.name, nests, buffers)


def _real_consumers(graph: TensorGraph, nid: int):
    from .scheduler import real_consumers
    return real_consumers(graph, nid)


def _fwd_stream(graph, chains, tensor, gid):
    cons = chains[tensor]["consumers"]
    pos = cons.index(gid)
    if pos + 1 < len(cons):
        return _seg_name(graph, tensor, pos + 1)
    return None


# ------------------------------------------------------------- liveness

@dataclass
class CompatBuffer:
    name: str          # group-qualified: "<group>.<buffer>"
    group: str
    words: int
    bits: int
    first_write: int
    last_read: int


@dataclass
class CompatibilityGraph:
    buffers: list[CompatBuffer]
    edges: list[tuple[str, str]]

    def to_json(self) -> str:
        doc = {
            "buffers": [vars(b) for b in self.buffers],
            "edges": [list(e) for e in self.edges],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CompatibilityGraph":
        doc = json.loads(text)
        bufs = [CompatBuffer(**b) for b in doc["buffers"]]
        return cls(bufs, [tuple(e) for e in doc["edges"]])


def buffer_lifetimes(gi: GroupImpl) -> None:
    """Fill first_write/last_read (step = nest index) on the buffers."""
    for b in gi.buffers.values():
        b.first_write = -1
        b.last_read = -1
    for step, nest in enumerate(gi.nests):
        for op in nest.factors:
            if op.kind == "buffer" and op.name in gi.buffers:
                gi.buffers[op.name].last_read = step
        if nest.out.kind == "buffer" and nest.out.name in gi.buffers:
            b = gi.buffers[nest.out.name]
            if b.first_write < 0:
                b.first_write = step
    for b in gi.buffers.values():
        if b.last_read < 0:
            b.last_read = b.first_write


def liveness(kernel: KernelImpl) -> CompatibilityGraph:
    """Per-buffer lifetimes at loop-nest granularity; compatibility edges
    join buffers of the same group whose lifetimes do not overlap.
    Buffers in different groups run concurrently and never share."""
    bits = kernel.fmt.width_bits
    buffers: list[CompatBuffer] = []
    edges: list[tuple[str, str]] = []
    for gi in kernel.groups:
        buffer_lifetimes(gi)
        local = []
        for b in gi.buffers.values():
            cb = CompatBuffer(f"{gi.name}.{b.name}", gi.name, b.words,
                              b.words * bits, b.first_write, b.last_read)
            local.append(cb)
            buffers.append(cb)
        for i in range(len(local)):
            for j in range(i + 1, len(local)):
                a, b = local[i], local[j]
                if a.last_read < b.first_write or b.last_read < a.first_write:
                    edges.append(tuple(sorted((a.name, b.name))))
    buffers.sort(key=lambda b: b.name)
    edges.sort()
    return CompatibilityGraph(buffers, edges)


# ------------------------------------------------------- fault injection

def inject_fault(kernel: KernelImpl, gid: int) -> None:
    """Test hook: corrupt the given group's streamed output so that
    verification harnesses can prove they detect bad groups."""
    for gi in kernel.groups:
        if gi.gid == gid:
            gi.corrupt = True
            return
    raise KeyError(gid)


# ------------------------------------------------------------ execution

@dataclass
class ExecTrace:
    events: list[dict]
    max_occupancy: dict[str, int]
    steps: int

    def to_json_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


def execute_kernel(kernel: KernelImpl, inputs: dict[str, np.ndarray],
                   fifo_depths: dict[str, int] | int | None = None,
                   canary: bool = False, capture: bool = False):
    """Run the lowered design on one element's inputs.

    fifo_depths: None means full tensor size per stream (the default
    sizing); an int or per-stream dict bounds the FIFOs and switches to
    the stepped process interpreter with deadlock detection.

    Returns (outputs, trace) and, with capture=True, a third dict of
    every streamed tensor's value keyed by graph node id.
    """
    depths = _depth_map(kernel, fifo_depths)
    full = all(depths[s] >= info.words for s, info in kernel.streams.items())
    if full:
        return _run_sequential(kernel, inputs, canary=canary, capture=capture)
    return _run_stepping(kernel, inputs, depths, capture=capture)


def _depth_map(kernel, fifo_depths):
    if fifo_depths is None:
        return {s: info.words for s, info in kernel.streams.items()}
    if isinstance(fifo_depths, int):
        return {s: fifo_depths for s in kernel.streams}
    out = {}
    for s, info in kernel.streams.items():
        out[s] = fifo_depths.get(s, info.words)
    return out


def _poison_value(fmt):
    if isinstance(fmt, Fixed):
        return fmt.max_raw
    return np.nan


def _run_sequential(kernel, inputs, canary=False, capture=False):
    graph = kernel.graph
    fmt = kernel.fmt
    ev = _make_eval(fmt)
    sdata: dict[str, np.ndarray] = {}

    if canary:
        for gi in kernel.groups:
            buffer_lifetimes(gi)

    for name, stream in kernel.input_feeds:
        arr = np.asarray(inputs[name], dtype=np.float64)
        node = graph.node(kernel.streams[stream].tensor)
        if arr.shape != node.shape:
            raise ValueError(f"input {name!r}: shape {arr.shape} != {node.shape}")
        sdata[stream] = ev.encode(arr).reshape(-1)

    events = []
    step = 0
    for gi in kernel.groups:
        events.append({"group": gi.name, "event": "start", "step": step})
        bufs: dict[str, np.ndarray] = {}
        last_value = None
        for si, nest in enumerate(gi.nests):
            if nest.kind == "copy":
                src = nest.factors[0]
                if src.kind == "stream":
                    data = sdata[src.name]
                else:
                    data = bufs[src.name].reshape(-1)
                if nest.out.kind == "buffer":
                    shape = graph.node(gi.buffers[nest.out.name].tensor).shape
                    bufs[nest.out.name] = data.reshape(shape).copy()
                else:
                    sdata[nest.out.name] = data.copy()
                if nest.forward:
                    sdata[nest.forward] = data.copy()
            else:
                factor_values = []
                for op in nest.factors:
                    if op.kind == "buffer":
                        factor_values.append(bufs[op.name])
                    else:
                        factor_values.append(sdata[op.name].reshape(op.shape))
                node = graph.node(nest.node)
                if nest.kind == "contract":
                    view = contraction_view(graph, nest.node)
                    val = ev.contract(view, factor_values, nest.node)
                elif nest.kind == "mul":
                    val = ev.mul(factor_values[0], factor_values[1], nest.node)
                elif nest.kind == "add":
                    val = ev.add(factor_values[0], factor_values[1], nest.node)
                else:  # materialized outer product
                    a, b = factor_values
                    ra = a.reshape(a.shape + (1,) * b.ndim)
                    val = ev.mul(np.broadcast_to(ra, node.shape).copy(),
                                 np.broadcast_to(b, node.shape).copy(), nest.node)
                val = np.asarray(val).reshape(node.shape)
                last_value = (nest, val)
                if nest.out.kind == "buffer":
                    bufs[nest.out.name] = val
                else:
                    sdata[nest.out.name] = val.reshape(-1).copy()
            if canary:
                poison = _poison_value(fmt)
                for b in gi.buffers.values():
                    if b.last_read == si and b.name in bufs:
                        bufs[b.name] = np.full_like(bufs[b.name], poison)
            step += 1
        if gi.corrupt and last_value is not None:
            nest, val = last_value
            bump = 1 if isinstance(fmt, Fixed) else 1.0
            if nest.out.kind == "stream":
                sdata[nest.out.name] = sdata[nest.out.name].copy()
                sdata[nest.out.name][0] += bump
            else:
                bufs[nest.out.name].reshape(-1)[0] += bump
        events.append({"group": gi.name, "event": "finish", "step": step})

    outputs = {}
    for name, stream in kernel.output_drains:
        node = graph.node(kernel.streams[stream].tensor)
        outputs[name] = ev.decode(sdata[stream]).reshape(node.shape)

    trace = ExecTrace(events, {s: kernel.streams[s].words for s in kernel.streams},
                      step)
    if capture:
        seen = {}
        for s, info in kernel.streams.items():
            if s in sdata and s.endswith("_s0"):
                seen[info.tensor] = ev.decode(sdata[s]).reshape(
                    graph.node(info.tensor).shape)
        return outputs, trace, seen
    return outputs, trace


# --- stepped process interpreter -------------------------------------

class _ScalarOps:
    def __init__(self, fmt: ScalarFormat):
        self.fmt = fmt
        if isinstance(fmt, Fixed):
            self.mul = lambda a, b: self._fxmul(a, b)
            self.add = lambda a, b: self._fxadd(a, b)
        elif isinstance(fmt, Float32):
            self.mul = lambda a, b: np.float32(a) * np.float32(b)
            self.add = lambda a, b: np.float32(a) + np.float32(b)
        elif isinstance(fmt, CustomFloat):
            self.mul = lambda a, b: float(fmt.quantize(a * b))
            self.add = lambda a, b: float(fmt.quantize(a + b))
        else:
            self.mul = lambda a, b: a * b
            self.add = lambda a, b: a + b

    def _fxmul(self, a, b):
        out = self.fmt.round_shift(int(a) * int(b))
        self.fmt.check_range(out)
        return out

    def _fxadd(self, a, b):
        out = int(a) + int(b)
        self.fmt.check_range(out)
        return out


class _Fifo:
    def __init__(self, cap):
        self.q = deque()
        self.cap = cap
        self.maxocc = 0

    def can_push(self):
        return len(self.q) < self.cap

    def push(self, v):
        self.q.append(v)
        self.maxocc = max(self.maxocc, len(self.q))

    def can_pop(self):
        return len(self.q) > 0

    def pop(self):
        return self.q.popleft()


def _strides(shape):
    st = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        st[i] = st[i + 1] * shape[i + 1]
    return st


def _iter_indices(extents):
    idx = [0] * len(extents)
    if not extents:
        yield ()
        return
    total = 1
    for x in extents:
        total *= x
    for _ in range(total):
        yield tuple(idx)
        for d in range(len(extents) - 1, -1, -1):
            idx[d] += 1
            if idx[d] < extents[d]:
                break
            idx[d] = 0


def _group_process(gi: GroupImpl, graph, ops: _ScalarOps, zero):
    bufs = {name: [zero] * b.words for name, b in gi.buffers.items()}

    def addr(op: Operand, idx):
        st = _strides(op.shape)
        return sum(st[d] * idx[ax] for d, ax in enumerate(op.axes))

    last_push = {"stream": None}

    def run():
        for nest in gi.nests:
            extents = [x for _, x in nest.loops]
            if nest.kind == "copy":
                src = nest.factors[0]
                words = extents[0]
                for w in range(words):
                    if src.kind == "stream":
                        v = yield ("pop", src.name)
                    else:
                        v = bufs[src.name][w]
                    if nest.out.kind == "buffer":
                        bufs[nest.out.name][w] = v
                    else:
                        yield ("push", nest.out.name, v)
                    if nest.forward:
                        yield ("push", nest.forward, v)
                continue
            n_res = nest.n_result
            res_ext = extents[:n_res]
            red_ext = extents[n_res:]
            flat_out = 0
            for ridx in _iter_indices(res_ext):
                if nest.kind == "contract":
                    acc = zero
                    for kidx in _iter_indices(red_ext):
                        idx = ridx + kidx
                        term = None
                        for op in nest.factors:
                            v = bufs[op.name][addr(op, idx)]
                            term = v if term is None else ops.mul(term, v)
                        acc = ops.add(acc, term)
                    val = acc
                else:
                    vals = []
                    for op in nest.factors:
                        if op.kind == "stream":
                            v = yield ("pop", op.name)
                        else:
                            v = bufs[op.name][addr(op, ridx)]
                        vals.append(v)
                    if nest.kind == "add":
                        val = ops.add(vals[0], vals[1])
                    else:
                        val = ops.mul(vals[0], vals[1])
                if gi.corrupt and flat_out == 0 and nest is gi.nests[-1]:
                    val = ops.add(val, 1 if isinstance(ops.fmt, Fixed) else 1.0)
                if nest.out.kind == "buffer":
                    st = _strides(nest.out.shape)
                    a = sum(st[d] * ridx[ax] for d, ax in enumerate(nest.out.axes))
                    bufs[nest.out.name][a] = val
                else:
                    yield ("push", nest.out.name, val)
                flat_out += 1

    return run()


def _run_stepping(kernel, inputs, depths, capture=False):
    graph = kernel.graph
    fmt = kernel.fmt
    ev = _make_eval(fmt)
    ops = _ScalarOps(fmt)
    zero = 0 if isinstance(fmt, Fixed) else 0.0

    fifos = {s: _Fifo(depths[s]) for s in kernel.streams}
    captured: dict[str, list] = {s: [] for s in kernel.streams}

    def feeder(name, stream):
        data = ev.encode(np.asarray(inputs[name], dtype=np.float64)).reshape(-1)
        def run():
            for v in data.tolist() if data.dtype != object else list(data):
                yield ("push", stream, v)
        return run()

    collected: dict[str, list] = {}

    def collector(name, stream, words):
        collected[name] = []
        def run():
            for _ in range(words):
                v = yield ("pop", stream)
                collected[name].append(v)
        return run()

    procs: list[tuple[str, object]] = []
    for name, stream in kernel.input_feeds:
        procs.append((f"feed:{name}", feeder(name, stream)))
    for gi in kernel.groups:
        procs.append((gi.name, _group_process(gi, graph, ops, zero)))
    for name, stream in kernel.output_drains:
        procs.append((f"drain:{name}", collector(
            name, stream, kernel.streams[stream].words)))

    pending: dict[str, tuple] = {}
    started: dict[str, int] = {}
    finished: dict[str, int] = {}
    alive = {pname: gen for pname, gen in procs}
    step = 0
    events = []

    def advance(pname, gen, send=None):
        nonlocal step
        try:
            req = gen.send(send)
        except StopIteration:
            finished[pname] = step
            del alive[pname]
            pending.pop(pname, None)
            return None
        pending[pname] = req
        return req

    for pname, gen in procs:
        started[pname] = 0
        advance(pname, gen)

    while alive:
        progressed = False
        for pname, gen in procs:
            if pname not in alive:
                continue
            while pname in alive:
                req = pending.get(pname)
                if req is None:
                    break
                if req[0] == "push":
                    _, s, v = req
                    if not fifos[s].can_push():
                        break
                    fifos[s].push(v)
                    captured[s].append(v)
                    step += 1
                    progressed = True
                    advance(pname, gen)
                else:
                    _, s = req
                    if not fifos[s].can_pop():
                        break
                    v = fifos[s].pop()
                    step += 1
                    progressed = True
                    advance(pname, gen, v)
        if alive and not progressed:
            blocked = []
            for pname in alive:
                req = pending.get(pname)
                if req:
                    blocked.append((pname,
                                    "write" if req[0] == "push" else "read",
                                    req[1]))
            raise DeadlockError(blocked)

    outputs = {}
    for name, stream in kernel.output_drains:
        node = graph.node(kernel.streams[stream].tensor)
        arr = np.array(collected[name], dtype=object) \
            if isinstance(fmt, Fixed) and not fmt.fits_int64 \
            else np.array(collected[name])
        outputs[name] = ev.decode(arr).reshape(node.shape)

    for pname in started:
        events.append({"group": pname, "event": "start", "step": started[pname]})
    for pname, s in finished.items():
        events.append({"group": pname, "event": "finish", "step": s})
    events.sort(key=lambda e: (e["step"], e["group"], e["event"]))
    trace = ExecTrace(events, {s: f.maxocc for s, f in fifos.items()}, step)
    if capture:
        seen = {}
        for s, vals in captured.items():
            info = kernel.streams[s]
            if s.endswith("_s0") and len(vals) == info.words:
                arr = np.array(vals, dtype=object) \
                    if isinstance(fmt, Fixed) and not fmt.fits_int64 \
                    else np.array(vals)
                seen[info.tensor] = ev.decode(arr).reshape(
                    graph.node(info.tensor).shape)
        return outputs, trace, seen
    return outputs, trace


def min_safe_fifo_depths(kernel: KernelImpl, inputs,
                         verbose: bool = False) -> dict[str, int]:
    """Smallest per-stream FIFO depths that still avoid deadlock.

    Binary-searches each stream with the others at full size, then
    verifies the combination, growing any stream that still blocks.
    """
    full = {s: info.words for s, info in kernel.streams.items()}
    best = dict(full)
    for s in sorted(kernel.streams):
        lo, hi = 1, full[s]
        while lo < hi:
            mid = (lo + hi) // 2
            trial = dict(full)
            trial[s] = mid
            try:
                execute_kernel(kernel, inputs, fifo_depths=trial)
                hi = mid
            except DeadlockError:
                lo = mid + 1
        best[s] = lo
    while True:
        try:
            execute_kernel(kernel, inputs, fifo_depths=best)
            return best
        except DeadlockError as exc:
            grew = False
            for _, _, s in exc.blocked:
                if best[s] < full[s]:
                    best[s] = min(full[s], best[s] * 2)
                    grew = True
            if not grew:
                raise


# ------------------------------------------------------------ C emitter

def _c_scalar(fmt: ScalarFormat) -> tuple[str, str, str]:
    """(typedef line, mul expr template, add expr template)."""
    if isinstance(fmt, Float64):
        return ("typedef double ts_scalar;",
                "(%s) * (%s)", "(%s) + (%s)")
    if isinstance(fmt, Float32):
        return ("typedef float ts_scalar;",
                "(%s) * (%s)", "(%s) + (%s)")
    if isinstance(fmt, Fixed):
        if fmt.width_bits <= 32:
            return (f"typedef int{max(fmt.width_bits, 32)}_t ts_scalar;",
                    f"ts_fx_mul32(%s, %s, {fmt.frac_bits})", "(%s) + (%s)")
        return ("typedef int64_t ts_scalar;",
                f"ts_fx_mul64(%s, %s, {fmt.frac_bits})", "(%s) + (%s)")
    if isinstance(fmt, CustomFloat):
        q = f"ts_cf_quant(%s, {fmt.exp_bits}, {fmt.mantissa_bits})"
        return ("typedef double ts_scalar;",
                q % ("(%s) * (%s)",), q % ("(%s) + (%s)",))
    raise TypeError(fmt)


def _addr_expr(op: Operand, loop_names) -> str:
    st = _strides(op.shape)
    terms = []
    for d, ax in enumerate(op.axes):
        if st[d] == 1:
            terms.append(loop_names[ax])
        else:
            terms.append(f"{loop_names[ax]} * {st[d]}")
    return " + ".join(terms) if terms else "0"


def emit_c(kernel: KernelImpl, kernel_name: str) -> str:
    """Emit the kernel as C99: one function per group plus a dataflow top
    that wires the streams.  Compiles with a plain C compiler against the
    portable runtime header; HLS pragmas ride along as pragmas."""
    graph = kernel.graph
    fmt = kernel.fmt
    typedef, mul_t, add_t = _c_scalar(fmt)

    L: list[str] = []
    L.append("/* Generated streaming kernel: %s */" % kernel_name)
    L.append('#include "%s"' % RUNTIME_HEADER_NAME)
    L.append("")
    L.append(typedef)
    L.append("TS_DECLARE_STREAM(ts_scalar)")
    L.append("")

    def emit_group(gi: GroupImpl) -> None:
        params = []
        popped, pushed = _group_streams(gi)
        for s in popped:
            params.append(f"ts_stream *{s}")
        for s in pushed:
            params.append(f"ts_stream *{s}")
        L.append(f"static void {kernel_name}_{gi.name}({', '.join(params)})")
        L.append("{")
        for b in sorted(gi.buffers.values(), key=lambda b: b.name):
            L.append(f"    ts_scalar {b.name}[{b.words}];")
        for nest in gi.nests:
            _emit_nest(L, nest, mul_t, add_t)
        L.append("}")
        L.append("")

    def _emit_nest(L, nest: LoopNest, mul_t, add_t):
        ind = "    "
        names = [n for n, _ in nest.loops]
        if nest.kind == "copy":
            words = nest.loops[0][1]
            src = nest.factors[0]
            L.append(f"{ind}for (int i = 0; i < {words}; ++i) {{")
            L.append(f"{ind}#pragma HLS pipeline II=1")
            if src.kind == "stream":
                L.append(f"{ind}    ts_scalar w = ts_pop({src.name});")
            else:
                L.append(f"{ind}    ts_scalar w = {src.name}[i];")
            if nest.out.kind == "buffer":
                L.append(f"{ind}    {nest.out.name}[i] = w;")
            else:
                L.append(f"{ind}    ts_push({nest.out.name}, w);")
            if nest.forward:
                L.append(f"{ind}    ts_push({nest.forward}, w);")
            L.append(f"{ind}}}")
            return
        depth = 0
        for i, (name, extent) in enumerate(nest.loops):
            L.append(f"{ind}{'    ' * depth}for (int {name} = 0; {name} < {extent}; ++{name}) {{")
            depth += 1
            if nest.kind == "contract" and i == nest.n_result - 1:
                L.append(f"{ind}{'    ' * depth}ts_scalar acc = 0;")
            if i == len(nest.loops) - 1:
                body_ind = ind + "    " * depth
                if nest.kind == "contract":
                    L.append(f"{ind}{'    ' * (depth - 1)}#pragma HLS pipeline II=1")
                    L.append(f"{ind}{'    ' * (depth - 1)}#pragma HLS unroll factor={extent}")
                reads = []
                for op in nest.factors:
                    if op.kind == "stream":
                        reads.append(f"ts_pop({op.name})")
                    else:
                        reads.append(f"{op.name}[{_addr_expr(op, names)}]")
                if nest.kind == "contract":
                    term = reads[0]
                    for r in reads[1:]:
                        term = mul_t % (term, r)
                    L.append(f"{body_ind}acc = {add_t % ('acc', term)};")
                else:
                    expr = (add_t if nest.kind == "add" else mul_t) % (reads[0], reads[1])
                    if nest.out.kind == "buffer":
                        L.append(f"{body_ind}{nest.out.name}"
                                 f"[{_addr_expr(nest.out, names)}] = {expr};")
                    else:
                        L.append(f"{body_ind}ts_push({nest.out.name}, {expr});")
        if nest.kind == "contract":
            # close reduction loops, store at result depth
            for i in range(len(nest.loops) - 1, nest.n_result - 1, -1):
                depth -= 1
                L.append(f"{ind}{'    ' * depth}}}")
            body_ind = ind + "    " * depth
            if nest.out.kind == "buffer":
                L.append(f"{body_ind}{nest.out.name}"
                         f"[{_addr_expr(nest.out, names)}] = acc;")
            else:
                L.append(f"{body_ind}ts_push({nest.out.name}, acc);")
        while depth > 0:
            depth -= 1
            L.append(f"{ind}{'    ' * depth}}}")

    for gi in kernel.groups:
        emit_group(gi)

    ins = [d for d in _decl_order(kernel)]
    outs = kernel.output_drains
    params = [f"const ts_scalar *{n}" for n, _ in ins] + \
             [f"ts_scalar *{n}" for n, _ in outs]
    L.append(f"void {kernel_name}_top({', '.join(params)})")
    L.append("{")
    L.append("#pragma HLS dataflow")
    for s, info in sorted(kernel.streams.items()):
        L.append(f"    TS_STREAM_LOCAL({s}, {info.words});")
    L.append("")
    for name, stream in ins:
        words = kernel.streams[stream].words
        L.append(f"    for (int i = 0; i < {words}; ++i) ts_push(&{stream}, {name}[i]);")
    L.append("")
    for gi in kernel.groups:
        popped, pushed = _group_streams(gi)
        args = ", ".join(f"&{s}" for s in popped + pushed)
        L.append(f"    {kernel_name}_{gi.name}({args});")
    L.append("")
    for name, stream in outs:
        words = kernel.streams[stream].words
        L.append(f"    for (int i = 0; i < {words}; ++i) {name}[i] = ts_pop(&{stream});")
    L.append("}")
    return "\n".join(L) + "\n"


def _group_streams(gi: GroupImpl) -> tuple[list[str], list[str]]:
    popped: list[str] = []
    pushed: list[str] = []
    for nest in gi.nests:
        for op in nest.factors:
            if op.kind == "stream" and op.name not in popped:
                popped.append(op.name)
        if nest.out.kind == "stream" and nest.out.name not in pushed:
            pushed.append(nest.out.name)
        if nest.forward and nest.forward not in pushed:
            pushed.append(nest.forward)
    return popped, pushed


def _decl_order(kernel: KernelImpl):
    # inputs in graph declaration order
    order = {name: i for i, (name, _) in enumerate(kernel.input_feeds)}
    return sorted(kernel.input_feeds, key=lambda p: order[p[0]])
