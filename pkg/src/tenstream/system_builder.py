"""Assemble the compute-unit and system design around a lowered kernel.

Covers batch planning against the memory-channel capacity, lane-parallel
kernel replication over the wide bus, ping/pong channel pairing for
double buffering, deterministic channel assignment with the platform's
`sp=` connectivity syntax, and the ordered host step plan including the
lane-striped pack/unpack layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .formats import Fixed, ScalarFormat

__all__ = [
    "BoardSpec", "BatchPlan", "CuOptions", "CuDesign", "SystemError",
    "plan_batch", "build_cu", "assign_channels", "host_plan",
    "interleave", "deinterleave", "load_board", "default_board",
]

MAX_CUS_DOUBLE_BUFFERED = 16
SPLIT_IN_OUT_BELOW_CUS = 8


class SystemError(Exception):
    pass


@dataclass(frozen=True)
class BoardSpec:
    name: str
    hbm_channels: int
    channel_capacity_bytes: int
    bus_width_bits: int
    hbm_frequency_mhz: float
    pcie_bandwidth_gbps: float      # gigabits per second
    # per-SLR resource vectors
    lut: tuple[int, ...]
    ff: tuple[int, ...]
    bram: tuple[int, ...]
    uram: tuple[int, ...]
    dsp: tuple[int, ...]

    def totals(self) -> dict[str, int]:
        return {
            "lut": sum(self.lut), "ff": sum(self.ff), "bram": sum(self.bram),
            "uram": sum(self.uram), "dsp": sum(self.dsp),
        }

    @property
    def pcie_bytes_per_s(self) -> float:
        return self.pcie_bandwidth_gbps * 1e9 / 8.0


def load_board(path) -> BoardSpec:
    """Key-value board file; resource rows are `name SLR0=.. SLR1=..`."""
    scalars: dict[str, str] = {}
    vectors: dict[str, tuple[int, ...]] = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if rest and "=" in rest[0]:
                vectors[key] = tuple(int(x.split("=", 1)[1]) for x in rest)
            else:
                scalars[key] = rest[0]
    try:
        return BoardSpec(
            name=scalars.get("name", "board"),
            hbm_channels=int(scalars["hbm_channels"]),
            channel_capacity_bytes=int(scalars["channel_capacity_bytes"]),
            bus_width_bits=int(scalars["bus_width_bits"]),
            hbm_frequency_mhz=float(scalars["hbm_frequency_mhz"]),
            pcie_bandwidth_gbps=float(scalars["pcie_bandwidth_gbps"]),
            lut=vectors["lut"], ff=vectors["ff"], bram=vectors["bram"],
            uram=vectors["uram"], dsp=vectors["dsp"],
        )
    except KeyError as exc:
        raise SystemError(f"board file {path} is missing {exc}") from exc


def default_board() -> BoardSpec:
    ref = resources.files("tenstream").joinpath("boards/alveo_u280.board")
    with resources.as_file(ref) as path:
        return load_board(path)


# --------------------------------------------------------------- batches

@dataclass(frozen=True)
class BatchPlan:
    element_in_bytes: int
    element_out_bytes: int
    batch_elements: int          # E
    n_eq: int
    n_batches: int               # ceil(n_eq / E)
    n_cu: int
    iterations: int              # ceil(n_batches / n_cu)
    lanes: int

    @property
    def batch_in_bytes(self) -> int:
        return self.batch_elements * self.element_in_bytes

    @property
    def batch_out_bytes(self) -> int:
        return self.batch_elements * self.element_out_bytes

    def to_json(self) -> str:
        return json.dumps(vars(self) | {
            "batch_in_bytes": self.batch_in_bytes,
            "batch_out_bytes": self.batch_out_bytes,
        }, indent=2, sort_keys=True) + "\n"


def element_bytes(typed_program, fmt: ScalarFormat) -> tuple[int, int]:
    """(input bytes, output bytes) for one element, all tensors charged
    per element."""
    word = fmt.width_bits // 8
    n_in = sum(int(np.prod(d.shape)) for d in typed_program.inputs())
    n_out = sum(int(np.prod(d.shape)) for d in typed_program.outputs())
    return n_in * word, n_out * word


def plan_batch(board: BoardSpec, element_in_bytes: int, element_out_bytes: int,
               n_eq: int, lanes: int, n_cu: int = 1) -> BatchPlan:
    """Maximal batch that fits a channel, rounded down to a lane multiple:
    E = lanes * floor(capacity / in_bytes / lanes), so E + lanes elements
    would no longer fit."""
    if element_in_bytes <= 0 or lanes < 1 or n_eq < 1:
        raise SystemError("element size, lanes and n_eq must be positive")
    raw = board.channel_capacity_bytes // element_in_bytes
    e = (raw // lanes) * lanes
    if e == 0:
        raise SystemError(
            f"element of {element_in_bytes} B too large for a "
            f"{board.channel_capacity_bytes} B channel at {lanes} lanes")
    n_b = math.ceil(n_eq / e)
    return BatchPlan(element_in_bytes, element_out_bytes, e, n_eq, n_b,
                     n_cu, math.ceil(n_b / n_cu), lanes)


# ------------------------------------------------------------ CU design

@dataclass(frozen=True)
class CuOptions:
    double_buffering: bool = False
    bus_parallel: bool = False
    dataflow: bool = False

    @classmethod
    def none(cls) -> "CuOptions":
        return cls()


@dataclass(frozen=True)
class CuDesign:
    kernel_name: str
    fmt_key: str
    scalar_bits: int
    lanes: int                   # kernel instances fed by bus lanes
    bus_width_bits: int          # bus width actually used
    words_in: int                # per element, per kernel
    words_out: int
    channels_per_cu: int
    channel_roles: tuple[str, ...]
    n_cu: int
    opts: CuOptions

    @property
    def double_buffering(self) -> bool:
        return self.opts.double_buffering

    @property
    def dataflow(self) -> bool:
        return self.opts.dataflow


def build_cu(kernel_name: str, typed_program, fmt: ScalarFormat,
             board: BoardSpec, opts: CuOptions, n_cu: int = 1) -> CuDesign:
    """Lane count follows the bus split: bus_width / scalar_width kernels
    with bus_parallel (4 for 64-bit data, 8 for 32-bit), otherwise a
    single kernel on a scalar-wide channel."""
    scalar_bits = fmt.width_bits
    if board.bus_width_bits % scalar_bits != 0:
        raise SystemError(
            f"bus width {board.bus_width_bits} not a multiple of scalar "
            f"width {scalar_bits}")
    lanes = board.bus_width_bits // scalar_bits if opts.bus_parallel else 1
    if opts.bus_parallel and lanes < 2:
        raise SystemError("bus_parallel needs more than one lane")

    if opts.double_buffering:
        if n_cu > MAX_CUS_DOUBLE_BUFFERED:
            raise SystemError(
                f"double buffering caps the design at "
                f"{MAX_CUS_DOUBLE_BUFFERED} compute units")
        if n_cu < SPLIT_IN_OUT_BELOW_CUS:
            roles = ("in_even", "in_odd", "out_even", "out_odd")
        else:
            roles = ("even", "odd")
    else:
        roles = ("gmem",)

    in_b, out_b = element_bytes(typed_program, fmt)
    word = scalar_bits // 8
    return CuDesign(
        kernel_name=kernel_name,
        fmt_key=fmt.key,
        scalar_bits=scalar_bits,
        lanes=lanes,
        bus_width_bits=scalar_bits * lanes,
        words_in=in_b // word,
        words_out=out_b // word,
        channels_per_cu=len(roles),
        channel_roles=roles,
        n_cu=n_cu,
        opts=opts,
    )


def assign_channels(design: CuDesign, board: BoardSpec, n_cu: int | None = None) -> str:
    """Contiguous deterministic assignment: CU k owns channels
    [k*c, (k+1)*c).  One `sp=` line per port."""
    n = design.n_cu if n_cu is None else n_cu
    c = design.channels_per_cu
    if n * c > board.hbm_channels:
        raise SystemError(
            f"channel exhaustion: {n} CUs x {c} channels > "
            f"{board.hbm_channels} available")
    if design.double_buffering and n > MAX_CUS_DOUBLE_BUFFERED:
        raise SystemError(
            f"{n} CUs with double buffering exceeds the "
            f"{MAX_CUS_DOUBLE_BUFFERED}-CU cap")
    lines = []
    for k in range(n):
        base = k * c
        for i, role in enumerate(design.channel_roles):
            lines.append(f"sp=cu_{k}.m_axi_{role}:HBM[{base + i}]")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ host plan

def host_plan(batch: BatchPlan, design: CuDesign) -> dict:
    """Ordered host step schedule.

    Without double buffering each batch is transfer-in, run, transfer-out
    in sequence.  With it, phase b runs batch b on its parity set while
    the host writes batch b+1 to the other set and reads batch b-1 back.
    Fixed-point designs add host-side convert steps around the packing.
    """
    fixed = design.fmt_key.startswith("fixed")
    steps: list[dict] = []

    def pack_steps(b):
        out = []
        if fixed:
            out.append({"op": "convert_in", "batch": b, "format": design.fmt_key})
        out.append({"op": "pack", "batch": b, "lanes": design.lanes,
                    "elements": batch.batch_elements})
        return out

    def unpack_steps(b):
        out = [{"op": "unpack", "batch": b, "lanes": design.lanes,
                "elements": batch.batch_elements}]
        if fixed:
            out.append({"op": "convert_out", "batch": b, "format": design.fmt_key})
        return out

    steps.append({"op": "allocate", "bytes_in": batch.batch_in_bytes,
                  "bytes_out": batch.batch_out_bytes,
                  "channel_sets": 2 if design.double_buffering else 1})

    n_b = batch.n_batches
    if not design.double_buffering:
        for b in range(n_b):
            steps.extend(pack_steps(b))
            steps.append({"op": "transfer_in", "batch": b, "channel_set": 0})
            steps.append({"op": "run", "batch": b, "channel_set": 0})
            steps.append({"op": "transfer_out", "batch": b, "channel_set": 0})
            steps.extend(unpack_steps(b))
    else:
        par = lambda b: b % 2  # ping/pong parity
        steps.extend(pack_steps(0))
        steps.append({"op": "transfer_in", "batch": 0, "channel_set": par(0),
                      "phase": 0})
        for b in range(n_b):
            phase = b + 1
            steps.append({"op": "run", "batch": b, "channel_set": par(b),
                          "phase": phase})
            if b + 1 < n_b:
                steps.extend(pack_steps(b + 1))
                steps.append({"op": "transfer_in", "batch": b + 1,
                              "channel_set": par(b + 1), "phase": phase})
            if b - 1 >= 0:
                steps.append({"op": "transfer_out", "batch": b - 1,
                              "channel_set": par(b - 1), "phase": phase})
                steps.extend(unpack_steps(b - 1))
        steps.append({"op": "transfer_out", "batch": n_b - 1,
                      "channel_set": par(n_b - 1), "phase": n_b + 1})
        steps.extend(unpack_steps(n_b - 1))

    return {
        "kernel": design.kernel_name,
        "double_buffering": design.double_buffering,
        "iterations": batch.iterations,
        "n_cu": design.n_cu,
        "steps": steps,
    }


# ----------------------------------------------------------- interleave

def interleave(element_words: np.ndarray, lanes: int) -> np.ndarray:
    """Pack per-element word vectors into the lane-striped bus layout.

    Input (E, W): element e, word w.  Output flat, where bus beat
    g*W + w carries word w of elements g*lanes .. g*lanes+lanes-1, one
    per lane; elements 0..lanes-1 stripe lanes 0..lanes-1.
    """
    arr = np.asarray(element_words)
    e, w = arr.shape
    if e % lanes != 0:
        raise SystemError(f"{e} elements not divisible into {lanes} lanes")
    return arr.reshape(e // lanes, lanes, w).transpose(0, 2, 1).reshape(-1)


def deinterleave(bus_words: np.ndarray, lanes: int, words_per_element: int) -> np.ndarray:
    flat = np.asarray(bus_words)
    total = flat.size
    groups = total // (lanes * words_per_element)
    return flat.reshape(groups, words_per_element, lanes) \
               .transpose(0, 2, 1).reshape(groups * lanes, words_per_element)
