"""Value-based tensor DAG, reference interpreter, and FLOP accounting.

The graph holds tensors as immutable values: one node per operation,
structurally identical nodes merged (CSE).  A contraction whose operand
is an outer-product chain is evaluated in fused form, multiplying the
factors per reduction point, which is exactly what the generated loop
nests do.  The reference interpreter is the correctness oracle for the
rest of the pipeline.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .formats import (CustomFloat, Fixed, FixedOverflowError, Float32,
                      Float64, ScalarFormat)

__all__ = [
    "TNode", "TensorGraph", "FlopCount",
    "from_ast", "eval_reference", "count_flops_helmholtz", "count_flops",
    "product_factors", "dump", "save_tensor", "load_tensor",
]


@dataclass(frozen=True)
class TNode:
    """One tensor value.

    op is one of input/product/contract/mul/add/output; args are ids of
    earlier nodes, so the node list is always topologically ordered.
    """

    nid: int
    op: str
    args: tuple[int, ...]
    shape: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...] = ()
    name: str | None = None   # input/output only
    stmt: str | None = None   # statement that produced this value

    @property
    def size(self) -> int:
        n = 1
        for x in self.shape:
            n *= x
        return n


@dataclass
class TensorGraph:
    nodes: list[TNode] = field(default_factory=list)
    # name -> node id of the producing value (not the output wrapper)
    values: dict[str, int] = field(default_factory=dict)

    def node(self, nid: int) -> TNode:
        return self.nodes[nid]

    def by_op(self, op: str) -> list[TNode]:
        return [n for n in self.nodes if n.op == op]

    def inputs(self) -> list[TNode]:
        return self.by_op("input")

    def outputs(self) -> list[TNode]:
        return self.by_op("output")

    def consumers(self, nid: int) -> list[TNode]:
        return [n for n in self.nodes if nid in n.args]

    def validate(self):
        names = set()
        for i, n in enumerate(self.nodes):
            assert n.nid == i, "node ids must be dense"
            assert all(a < i for a in n.args), "edges must point backwards"
            if n.op == "output":
                assert n.name not in names, "duplicate output name"
                names.add(n.name)


class GraphBuilder:
    """Constructs a TensorGraph with structural sharing."""

    def __init__(self):
        self.graph = TensorGraph()
        self._memo: dict[tuple, int] = {}

    def _add(self, op, args, shape, pairs=(), name=None, stmt=None, cse=True) -> int:
        key = (op, args, pairs, name)
        if cse and key in self._memo:
            return self._memo[key]
        nid = len(self.graph.nodes)
        self.graph.nodes.append(TNode(nid, op, args, shape, pairs, name, stmt))
        if cse:
            self._memo[key] = nid
        return nid

    def input(self, name: str, shape, stmt=None) -> int:
        return self._add("input", (), tuple(shape), name=name, stmt=stmt)

    def product(self, a: int, b: int, stmt=None, cse=True) -> int:
        shape = self.graph.node(a).shape + self.graph.node(b).shape
        return self._add("product", (a, b), shape, stmt=stmt, cse=cse)

    def contract(self, a: int, pairs, stmt=None, cse=True) -> int:
        s = self.graph.node(a).shape
        paired = {p for pair in pairs for p in pair}
        shape = tuple(x for i, x in enumerate(s) if i not in paired)
        return self._add("contract", (a,), shape, tuple(pairs), stmt=stmt, cse=cse)

    def elem(self, op: str, a: int, b: int, stmt=None, cse=True) -> int:
        return self._add(op, (a, b), self.graph.node(a).shape, stmt=stmt, cse=cse)

    def output(self, name: str, a: int, stmt=None) -> int:
        return self._add("output", (a,), self.graph.node(a).shape,
                         name=name, stmt=stmt, cse=False)


def from_ast(tp, cse: bool = True) -> TensorGraph:
    """Lower a checked program to the value graph.

    One node per syntactic tensor operation; statement targets become
    named internal values; declared outputs get output wrapper nodes.
    """
    from . import frontend as fe

    b = GraphBuilder()
    env: dict[str, int] = {}

    def lower(e, stmt: str) -> int:
        e = fe._strip(e)
        if isinstance(e, fe.Ident):
            if e.name in env:
                return env[e.name]
            nid = b.input(e.name, tp.decls[e.name].shape)
            env[e.name] = nid
            return nid
        if isinstance(e, fe.Product):
            return b.product(lower(e.lhs, stmt), lower(e.rhs, stmt), stmt=stmt, cse=cse)
        if isinstance(e, fe.Contract):
            return b.contract(lower(e.operand, stmt), e.pairs, stmt=stmt, cse=cse)
        if isinstance(e, fe.ElemMul):
            return b.elem("mul", lower(e.lhs, stmt), lower(e.rhs, stmt), stmt=stmt, cse=cse)
        if isinstance(e, fe.ElemAdd):
            return b.elem("add", lower(e.lhs, stmt), lower(e.rhs, stmt), stmt=stmt, cse=cse)
        raise AssertionError(e)

    for stmt in tp.statements:
        nid = lower(stmt.expr, stmt.target)
        env[stmt.target] = nid
        b.graph.values[stmt.target] = nid

    for d in tp.outputs():
        b.output(d.name, env[d.name], stmt=d.name)

    g = b.graph
    g.validate()
    return g


# ------------------------------------------------------- contraction view

def product_factors(graph: TensorGraph, nid: int) -> list[int]:
    """Flatten a product chain into its factor node ids (left to right)."""
    node = graph.node(nid)
    if node.op != "product":
        return [nid]
    return product_factors(graph, node.args[0]) + product_factors(graph, node.args[1])


def is_virtual_product(graph: TensorGraph, nid: int) -> bool:
    """A product is virtual when it only ever feeds contractions (possibly
    through more products): it is fused into the consuming loop nests and
    never materialized."""
    node = graph.node(nid)
    if node.op != "product":
        return False
    consumers = graph.consumers(nid)
    if not consumers:
        return False
    return all(c.op == "contract" or is_virtual_product(graph, c.nid)
               for c in consumers)


@dataclass(frozen=True)
class ContractionView:
    """A contraction over an outer-product chain, in loop-nest form.

    result_axes / reduction_axes give, per factor, the mapping from the
    factor's local positions to loop axes: entry (f, local_pos, axis).
    """

    factors: tuple[int, ...]                 # factor node ids
    result_shape: tuple[int, ...]
    reduction_shape: tuple[int, ...]
    # per factor: tuple of ("r", i) or ("k", j) tags, one per local axis
    factor_axes: tuple[tuple[tuple[str, int], ...], ...]


def contraction_view(graph: TensorGraph, nid: int) -> ContractionView:
    node = graph.node(nid)
    assert node.op == "contract"
    factors = product_factors(graph, node.args[0])
    shapes = [graph.node(f).shape for f in factors]
    offsets = []
    total = 0
    for s in shapes:
        offsets.append(total)
        total += len(s)
    flat_shape = [x for s in shapes for x in s]

    # unify paired global positions into reduction classes
    red_of: dict[int, int] = {}
    reduction_shape = []
    for a, b in node.pairs:
        j = len(reduction_shape)
        red_of[a] = j
        red_of[b] = j
        reduction_shape.append(flat_shape[a])
    result_of: dict[int, int] = {}
    result_shape = []
    for pos in range(total):
        if pos not in red_of:
            result_of[pos] = len(result_shape)
            result_shape.append(flat_shape[pos])

    factor_axes = []
    for f, s in enumerate(shapes):
        tags = []
        for local in range(len(s)):
            pos = offsets[f] + local
            if pos in red_of:
                tags.append(("k", red_of[pos]))
            else:
                tags.append(("r", result_of[pos]))
        factor_axes.append(tuple(tags))

    assert tuple(result_shape) == node.shape
    return ContractionView(tuple(factors), tuple(result_shape),
                           tuple(reduction_shape), tuple(factor_axes))


def _einsum_spec(view: ContractionView) -> str:
    letters = string.ascii_letters
    n_res = len(view.result_shape)
    subs = []
    for tags in view.factor_axes:
        subs.append("".join(
            letters[i] if kind == "r" else letters[n_res + i]
            for kind, i in tags))
    out = letters[:n_res]
    return ",".join(subs) + "->" + out


# ------------------------------------------------------------ evaluators

class _FloatEval:
    """Float64/Float32 evaluation via numpy (deterministic)."""

    def __init__(self, dtype):
        self.dtype = dtype

    def encode(self, arr):
        return np.asarray(arr, dtype=self.dtype)

    def decode(self, arr):
        return np.asarray(arr, dtype=np.float64)

    def contract(self, view, factor_values, node):
        if not view.reduction_shape and len(factor_values) == 1:
            return factor_values[0]
        return np.einsum(_einsum_spec(view), *factor_values)

    def mul(self, a, b, node):
        return a * b

    def add(self, a, b, node):
        return a + b


class _CustomFloatEval:
    """Reduced-precision float: round through nearest representable after
    each multiply and each add; reduction in lexicographic order."""

    def __init__(self, fmt: CustomFloat):
        self.fmt = fmt

    def encode(self, arr):
        return self.fmt.quantize(arr)

    def decode(self, arr):
        return np.asarray(arr, dtype=np.float64)

    def contract(self, view, factor_values, node):
        terms = _broadcast_terms(view, factor_values, self.fmt.quantize)
        res_size = int(np.prod(view.result_shape)) if view.result_shape else 1
        red_size = int(np.prod(view.reduction_shape)) if view.reduction_shape else 1
        flat = terms.reshape(res_size, red_size)
        acc = np.zeros(res_size)
        for t in range(red_size):
            acc = self.fmt.quantize(acc + flat[:, t])
        return acc.reshape(view.result_shape)

    def mul(self, a, b, node):
        return self.fmt.quantize(a * b)

    def add(self, a, b, node):
        return self.fmt.quantize(a + b)


class _FixedEval:
    """Exact fixed-point evaluation on raw integers.

    Multiplication keeps the full double-width product and rounds once
    (RNE); addition is exact at the shared scale, so only overflow needs
    checking, which is done per accumulation step.
    """

    def __init__(self, fmt: Fixed):
        self.fmt = fmt

    def encode(self, arr):
        return self.fmt.encode(arr)

    def decode(self, arr):
        return self.fmt.decode(arr)

    def _qmul(self, a, b, node):
        prod = a * b
        out = self.fmt.round_shift(prod)
        self.fmt.check_range(out, node)
        return out

    def contract(self, view, factor_values, node):
        terms = factor_values[0]
        # align first factor to the (result..., reduction...) frame
        terms = _expand(view, 0, terms)
        for i in range(1, len(factor_values)):
            terms = self._qmul(terms, _expand(view, i, factor_values[i]), node)
        terms = np.broadcast_to(
            terms, view.result_shape + view.reduction_shape).copy()
        res_size = int(np.prod(view.result_shape)) if view.result_shape else 1
        red_size = int(np.prod(view.reduction_shape)) if view.reduction_shape else 1
        flat = terms.reshape(res_size, red_size)
        if self.fmt.fits_int64:
            acc = np.zeros(res_size, dtype=np.int64)
        else:
            acc = np.empty(res_size, dtype=object)
            acc[:] = 0
        for t in range(red_size):
            acc = acc + flat[:, t]
            self.fmt.check_range(acc, node)
        return acc.reshape(view.result_shape)

    def mul(self, a, b, node):
        return self._qmul(a, b, node)

    def add(self, a, b, node):
        out = a + b
        self.fmt.check_range(out, node)
        return out


def _expand(view: ContractionView, f: int, value):
    """View a factor in the (result..., reduction...) loop frame."""
    tags = view.factor_axes[f]
    n_res = len(view.result_shape)
    frame_pos = [(i if kind == "r" else n_res + i) for kind, i in tags]
    order = np.argsort(frame_pos, kind="stable")
    v = np.transpose(value, order)
    full = [1] * (n_res + len(view.reduction_shape))
    for ax_sorted, local in enumerate(order):
        full[frame_pos[local]] = value.shape[local]
    return v.reshape(full)


def _broadcast_terms(view, factor_values, quantize):
    terms = _expand(view, 0, factor_values[0])
    for i in range(1, len(factor_values)):
        terms = quantize(terms * _expand(view, i, factor_values[i]))
    return np.broadcast_to(terms, view.result_shape + view.reduction_shape)


def _make_eval(fmt: ScalarFormat):
    if isinstance(fmt, Float64):
        return _FloatEval(np.float64)
    if isinstance(fmt, Float32):
        return _FloatEval(np.float32)
    if isinstance(fmt, Fixed):
        return _FixedEval(fmt)
    if isinstance(fmt, CustomFloat):
        return _CustomFloatEval(fmt)
    raise TypeError(f"unsupported format {fmt}")


def eval_reference(graph: TensorGraph, inputs: dict[str, np.ndarray],
                   fmt: ScalarFormat = Float64()) -> dict[str, np.ndarray]:
    """Evaluate the graph by direct summation, quantizing every multiply
    and every add to `fmt`.  Returns {output name: float64 tensor}.

    Contractions over product chains are computed in fused form, which
    matches the operation order of the lowered loop nests; fixed-point
    results are therefore bit-exact against the dataflow interpreter.
    """
    ev = _make_eval(fmt)
    values: dict[int, np.ndarray] = {}

    def materialize(nid: int):
        if nid in values:
            return values[nid]
        node = graph.node(nid)
        if node.op == "input":
            if node.name not in inputs:
                raise KeyError(f"missing input tensor {node.name!r}")
            arr = np.asarray(inputs[node.name], dtype=np.float64)
            if arr.shape != node.shape:
                raise ValueError(
                    f"input {node.name!r} has shape {arr.shape}, "
                    f"declared {node.shape}")
            v = ev.encode(arr)
        elif node.op == "contract":
            view = contraction_view(graph, nid)
            facts = [materialize(f) for f in view.factors]
            v = ev.contract(view, facts, nid)
        elif node.op == "product":
            # materialized outer product (consumer is not a contraction)
            a, b = (materialize(x) for x in node.args)
            ra = a.reshape(a.shape + (1,) * b.ndim)
            v = ev.mul(np.broadcast_to(ra, node.shape).copy(),
                       np.broadcast_to(b, node.shape).copy(), nid)
        elif node.op == "mul":
            v = ev.mul(materialize(node.args[0]), materialize(node.args[1]), nid)
        elif node.op == "add":
            v = ev.add(materialize(node.args[0]), materialize(node.args[1]), nid)
        elif node.op == "output":
            v = materialize(node.args[0])
        else:
            raise AssertionError(node.op)
        values[nid] = v
        return v

    out = {}
    for node in graph.outputs():
        try:
            out[node.name] = ev.decode(materialize(node.nid)).reshape(node.shape)
        except FixedOverflowError as exc:
            if exc.node is None:
                exc.node = node.nid
            raise
    return out


# --------------------------------------------------------- FLOP counting

@dataclass(frozen=True)
class FlopCount:
    multiplies: int
    adds: int

    @property
    def total(self) -> int:
        return self.multiplies + self.adds

    def __add__(self, other: "FlopCount") -> "FlopCount":
        return FlopCount(self.multiplies + other.multiplies, self.adds + other.adds)


def count_flops_helmholtz(p: int) -> FlopCount:
    """Operations per element of the factorized inverse-Helmholtz kernel:
    six p^4 multiply-accumulate nests plus a p^3 Hadamard product, i.e.
    total (12p+1)p^3."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return FlopCount(multiplies=(6 * p + 1) * p ** 3, adds=6 * p ** 4)


def _node_flops(graph: TensorGraph, nid: int) -> FlopCount:
    node = graph.node(nid)
    if node.op == "contract":
        view = contraction_view(graph, nid)
        m = node.size
        r = int(np.prod(view.reduction_shape)) if view.reduction_shape else 1
        # one multiply-accumulate per reduction point; the accumulator
        # starts at zero, so every point costs one add as well
        return FlopCount(multiplies=m * r * (len(view.factors) - 1), adds=m * r)
    if node.op == "mul":
        return FlopCount(node.size, 0)
    if node.op == "add":
        return FlopCount(0, node.size)
    if node.op == "product":
        return FlopCount(node.size, 0)
    return FlopCount(0, 0)


def count_flops(schedule) -> FlopCount:
    """Exact count of scalar multiplies/adds executed by the scheduled
    loop nests for one element."""
    total = FlopCount(0, 0)
    for group in schedule.groups:
        for nid in group.members:
            if schedule.graph.node(nid).op == "output":
                continue  # pass-through copy groups move data only
            total = total + _node_flops(schedule.graph, nid)
    return total


# ---------------------------------------------------------------- debug

def dump(graph: TensorGraph) -> str:
    """One node per line: id op shape operands [pairs]."""
    lines = []
    for n in graph.nodes:
        shape = "x".join(str(x) for x in n.shape)
        extra = ""
        if n.pairs:
            extra = " pairs=" + ",".join(f"({a},{b})" for a, b in n.pairs)
        if n.name:
            extra += f" name={n.name}"
        args = ",".join(str(a) for a in n.args)
        lines.append(f"{n.nid} {n.op} [{shape}] ({args}){extra}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- tensor io

def save_tensor(path, name: str, arr: np.ndarray):
    """Flat row-major little-endian float64 + sidecar text header."""
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        arr.tofile(f)
    dims = " ".join(str(x) for x in arr.shape)
    with open(str(path) + ".hdr", "w") as f:
        f.write(f"{name} {arr.ndim} {dims}\n")


def load_tensor(path) -> tuple[str, np.ndarray]:
    with open(str(path) + ".hdr") as f:
        parts = f.read().split()
    name, rank = parts[0], int(parts[1])
    shape = tuple(int(x) for x in parts[2:2 + rank])
    data = np.fromfile(path, dtype="<f8").reshape(shape)
    return name, data


def save_tensor_text(path, arr: np.ndarray):
    np.savetxt(path, np.asarray(arr, dtype=np.float64).reshape(-1)[None], fmt="%.17g")


def load_tensor_text(path, shape) -> np.ndarray:
    return np.loadtxt(path).reshape(shape)
