"""Assign local buffers with disjoint lifetimes to shared physical banks.

Greedy clique partitioning over the compatibility graph: buffers are
placed largest first into the first bank whose members they are all
compatible with, overlaying at offset 0.  The cost metric is total bits,
a proxy for BRAM/URAM pressure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .lowering import CompatibilityGraph

__all__ = ["Bank", "BankAssignment", "plan_banks"]


@dataclass
class Bank:
    bank_id: int
    size_bits: int
    members: list[str]


@dataclass
class BankAssignment:
    banks: list[Bank]
    mapping: dict[str, tuple[int, int]]   # buffer -> (bank, offset)
    total_bits: int
    unshared_bits: int

    @property
    def saving(self) -> float:
        if self.unshared_bits == 0:
            return 0.0
        return 1.0 - self.total_bits / self.unshared_bits

    def to_json(self) -> str:
        doc = {
            "banks": [{"id": b.bank_id, "size_bits": b.size_bits,
                       "members": b.members} for b in self.banks],
            "mapping": {k: {"bank": v[0], "offset": v[1]}
                        for k, v in sorted(self.mapping.items())},
            "total_bits": self.total_bits,
            "unshared_bits": self.unshared_bits,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def plan_banks(compat: CompatibilityGraph) -> BankAssignment:
    """Deterministic greedy packing; never worse than one bank per buffer."""
    compatible = set(compat.edges) | {(b, a) for a, b in compat.edges}
    order = sorted(compat.buffers, key=lambda b: (-b.bits, b.name))

    banks: list[Bank] = []
    mapping: dict[str, tuple[int, int]] = {}
    for buf in order:
        placed = False
        for bank in banks:
            if all((m, buf.name) in compatible for m in bank.members):
                bank.members.append(buf.name)
                bank.size_bits = max(bank.size_bits, buf.bits)
                mapping[buf.name] = (bank.bank_id, 0)
                placed = True
                break
        if not placed:
            bank = Bank(len(banks), buf.bits, [buf.name])
            banks.append(bank)
            mapping[buf.name] = (bank.bank_id, 0)

    total = sum(b.size_bits for b in banks)
    unshared = sum(b.bits for b in compat.buffers)
    return BankAssignment(banks, mapping, total, unshared)
