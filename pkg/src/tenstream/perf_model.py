"""Analytical resource estimation and a cycle-approximate system simulator.

The resource side applies a per-format cost table (shipped defaults are
documented engineering estimates, all overridable) to the operator and
bank inventory of a design.  The timing side models the group pipeline
as fill + (slots-1) * max-interval per batch, PCIe transfers at the
configured bandwidth, and the ping/pong overlap of double buffering;
multiple compute units run in parallel but their host transfers are
serialized on the one PCIe link.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .formats import CustomFloat, Fixed, Float32, Float64, ScalarFormat
from .memory_planner import BankAssignment
from .scheduler import GroupSchedule, estimate_interval, node_operators
from .system_builder import BatchPlan, BoardSpec, CuDesign
from .tensor_ir import FlopCount

__all__ = [
    "CostTable", "ResourceEstimate", "SimReport", "FreqScale",
    "group_operator_counts", "cu_operator_count",
    "estimate_resources", "max_replication", "simulate", "metrics",
]

BRAM_TILE_BITS = 36_864
RESOURCE_CLASSES = ("lut", "ff", "bram", "uram", "dsp")


def _fmt_class(fmt_key: str) -> str:
    if fmt_key in ("f64", "f32"):
        return fmt_key
    if fmt_key.startswith("fixed"):
        return "fixed64" if int(fmt_key[5:]) > 32 else "fixed32"
    return "cf"


@dataclass(frozen=True)
class CostTable:
    """Per-operator resource costs.  Defaults are estimates for an
    UltraScale+ part, not measurements; calibrate per design."""

    dsp_per_multiplier: dict = field(default_factory=lambda: {
        "f64": 11, "f32": 3, "fixed64": 3, "fixed32": 1, "cf": 2})
    dsp_per_adder: dict = field(default_factory=lambda: {
        "f64": 3, "f32": 2, "fixed64": 0, "fixed32": 0, "cf": 1})
    lut_per_multiplier: dict = field(default_factory=lambda: {
        "f64": 700, "f32": 220, "fixed64": 1100, "fixed32": 250, "cf": 400})
    lut_per_adder: dict = field(default_factory=lambda: {
        "f64": 650, "f32": 200, "fixed64": 64, "fixed32": 32, "cf": 300})
    ff_per_multiplier: dict = field(default_factory=lambda: {
        "f64": 1100, "f32": 350, "fixed64": 900, "fixed32": 220, "cf": 500})
    ff_per_adder: dict = field(default_factory=lambda: {
        "f64": 700, "f32": 240, "fixed64": 64, "fixed32": 32, "cf": 350})
    lut_per_group: int = 900         # control logic around each module
    ff_per_group: int = 1200
    bram_port_factor: int = 2
    uram_threshold_bits: int = 294_912   # 288 Kb: one URAM block
    uram_block_bits: int = 294_912
    shell: dict = field(default_factory=lambda: {
        "lut": 0, "ff": 0, "bram": 0, "uram": 0, "dsp": 0})

    def scaled(self, factor: float) -> "CostTable":
        scale = lambda d: {k: v * factor for k, v in d.items()}
        return replace(
            self,
            dsp_per_multiplier=scale(self.dsp_per_multiplier),
            dsp_per_adder=scale(self.dsp_per_adder),
            lut_per_multiplier=scale(self.lut_per_multiplier),
            lut_per_adder=scale(self.lut_per_adder),
            ff_per_multiplier=scale(self.ff_per_multiplier),
            ff_per_adder=scale(self.ff_per_adder),
        )


@dataclass
class ResourceEstimate:
    per_cu: dict
    total: dict
    utilization: dict            # fraction of board totals
    n_cu: int
    channels_per_cu: int
    feasible: bool

    def worst_utilization(self) -> float:
        return max(self.utilization.values())


@dataclass
class SimReport:
    freq_mhz: float
    lanes: int
    n_cu: int
    n_batches: int
    iterations: int
    transfer_in_s: float          # per batch round
    transfer_out_s: float
    compute_s: float              # per batch round
    makespan_s: float
    serial_makespan_s: float
    cu_gflops: float = 0.0
    system_gflops: float = 0.0
    ideal_gflops: float = 0.0
    efficiency: float = 0.0
    gflops_per_watt: float | None = None
    num_operators: int = 0
    flops_total: int = 0
    degenerate: bool = False      # zero elapsed time guard

    def to_json(self) -> str:
        return json.dumps(vars(self), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'#Ops':>8} {'f (MHz)':>9} {'Ideal GFLOPS':>13} "
            f"{'Achieved':>9} {'Efficiency':>10}",
            f"{self.num_operators:>8} {self.freq_mhz:>9.1f} "
            f"{self.ideal_gflops:>13.3f} {self.system_gflops:>9.3f} "
            f"{self.efficiency:>10.3f}",
            "",
            f"CU GFLOPS        {self.cu_gflops:.3f}",
            f"makespan         {self.makespan_s:.6f} s "
            f"(serial {self.serial_makespan_s:.6f} s)",
            f"per batch round  in {self.transfer_in_s:.6f} s, "
            f"compute {self.compute_s:.6f} s, out {self.transfer_out_s:.6f} s",
        ]
        if self.gflops_per_watt is not None:
            lines.append(f"GFLOPS/W         {self.gflops_per_watt:.3f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class FreqScale:
    """Piecewise map from worst-case utilization to achieved frequency.
    Empty means no scaling (the target frequency is achieved)."""

    points: tuple[tuple[float, float], ...] = ()

    def apply(self, utilization: float, target_mhz: float) -> float:
        for cap, mhz in sorted(self.points):
            if utilization <= cap:
                return mhz
        return target_mhz


# ------------------------------------------------------------- operators

def group_operator_counts(schedule: GroupSchedule) -> list[tuple[int, int]]:
    """(multipliers, adders) per group; nests inside one module share the
    widest operator bank, so a group costs its max, not its sum."""
    out = []
    for g in schedule.groups:
        mult = add = 0
        for nid in g.members:
            if schedule.graph.node(nid).op == "output":
                continue
            m, a = node_operators(schedule.graph, nid)
            mult = max(mult, m)
            add = max(add, a)
        out.append((mult, add))
    return out


def cu_operator_count(schedule: GroupSchedule, lanes: int) -> int:
    """Total floating/fixed point operators in one CU (all kernels)."""
    return sum(m + a for m, a in group_operator_counts(schedule)) * lanes


# ------------------------------------------------------------- resources

def estimate_resources(design: CuDesign, banks: BankAssignment,
                       table: CostTable, board: BoardSpec,
                       schedule: GroupSchedule) -> ResourceEstimate:
    cls = _fmt_class(design.fmt_key)
    ops = group_operator_counts(schedule)

    lut = ff = dsp = 0.0
    for mult, add in ops:
        dsp += mult * table.dsp_per_multiplier[cls] + add * table.dsp_per_adder[cls]
        lut += mult * table.lut_per_multiplier[cls] + add * table.lut_per_adder[cls]
        ff += mult * table.ff_per_multiplier[cls] + add * table.ff_per_adder[cls]
        lut += table.lut_per_group
        ff += table.ff_per_group

    bram_tiles = 0
    uram_blocks = 0
    for bank in banks.banks:
        if bank.size_bits > table.uram_threshold_bits:
            uram_blocks += math.ceil(bank.size_bits / table.uram_block_bits)
        else:
            bram_tiles += math.ceil(bank.size_bits / BRAM_TILE_BITS) \
                * table.bram_port_factor

    per_kernel = {"lut": lut, "ff": ff, "bram": bram_tiles,
                  "uram": uram_blocks, "dsp": dsp}
    per_cu = {k: v * design.lanes for k, v in per_kernel.items()}
    total = {k: table.shell[k] + design.n_cu * per_cu[k] for k in per_cu}
    totals = board.totals()
    utilization = {k: (total[k] / totals[k] if totals[k] else 0.0) for k in total}
    feasible = all(u <= 1.0 for u in utilization.values())
    return ResourceEstimate(per_cu, total, utilization, design.n_cu,
                            design.channels_per_cu, feasible)


def max_replication(estimate: ResourceEstimate, board: BoardSpec,
                    cap: float = 0.8) -> int:
    """Largest CU count whose utilization stays under `cap` in every
    resource class and whose channels fit the memory system."""
    totals = board.totals()
    shell_util = {
        k: (estimate.total[k] - estimate.n_cu * estimate.per_cu[k]) / totals[k]
        if totals[k] else 0.0 for k in estimate.per_cu
    }
    cu_util = {
        k: estimate.per_cu[k] / totals[k] if totals[k] else 0.0
        for k in estimate.per_cu
    }

    best = 0
    n = 1
    while True:
        fits = all(shell_util[k] + n * cu_util[k] <= cap for k in cu_util)
        if not fits or n * estimate.channels_per_cu > board.hbm_channels:
            break
        best = n
        n += 1
    return best


# ------------------------------------------------------------ simulation

def _stage_intervals(design: CuDesign, schedule) -> list[int]:
    read = design.words_in
    write = design.words_out
    if isinstance(schedule, GroupSchedule):
        compute = [estimate_interval(schedule.group(g), schedule.graph)
                   for g in schedule.stage_order]
    else:
        compute = list(schedule)   # precomputed interval list
    return [read] + compute + [write]


def simulate(design: CuDesign, batch: BatchPlan, board: BoardSpec,
             schedule: GroupSchedule, freq_mhz: float | None = None) -> SimReport:
    """Makespan under the chosen optimizations.

    Per batch, each kernel processes E/lanes element slots.  With the
    dataflow option the read/compute/write stages pipeline: cycles =
    sum(intervals) + (slots-1) * max(interval); without it every slot
    pays the full sequential sum.  Transfers move batch bytes at PCIe
    bandwidth and serialize across CUs; computes run in parallel.
    """
    f_hz = (freq_mhz or board.hbm_frequency_mhz) * 1e6
    stages = _stage_intervals(design, schedule)
    slots = batch.batch_elements // design.lanes
    if design.dataflow:
        cycles = sum(stages) + (slots - 1) * max(stages)
    else:
        cycles = slots * sum(stages)
    t_c = cycles / f_hz

    t_in1 = batch.batch_in_bytes / board.pcie_bytes_per_s
    t_out1 = batch.batch_out_bytes / board.pcie_bytes_per_s
    n_cu = design.n_cu
    rounds = batch.iterations
    t_in = n_cu * t_in1       # per round, serialized on the link
    t_out = n_cu * t_out1

    serial = rounds * (t_in + t_c + t_out)
    if design.double_buffering:
        span = t_in
        for r in range(rounds):
            nxt = t_in if r + 1 < rounds else 0.0
            prv = t_out if r > 0 else 0.0
            span += max(t_c, nxt + prv)
        span += t_out
        makespan = span
    else:
        makespan = serial

    return SimReport(
        freq_mhz=f_hz / 1e6, lanes=design.lanes, n_cu=n_cu,
        n_batches=batch.n_batches, iterations=rounds,
        transfer_in_s=t_in, transfer_out_s=t_out, compute_s=t_c,
        makespan_s=makespan, serial_makespan_s=serial,
    )


def metrics(report: SimReport, flops: FlopCount, n_eq: int,
            num_operators: int, freq_mhz: float,
            avg_power_w: float | None = None) -> SimReport:
    """Fill in GFLOPS, ideal GFLOPS (#operators x f), efficiency, and
    energy efficiency when a measured average power is supplied."""
    report.num_operators = num_operators
    report.flops_total = n_eq * flops.total
    report.ideal_gflops = num_operators * freq_mhz / 1e3
    if report.makespan_s <= 0.0 or report.compute_s <= 0.0:
        report.degenerate = True
        return report
    compute_total = report.iterations * report.compute_s
    report.cu_gflops = report.flops_total / compute_total / 1e9
    report.system_gflops = report.flops_total / report.makespan_s / 1e9
    if report.ideal_gflops > 0:
        report.efficiency = report.system_gflops / report.ideal_gflops
    if avg_power_w is not None and avg_power_w > 0:
        report.gflops_per_watt = report.system_gflops / avg_power_w
    return report
