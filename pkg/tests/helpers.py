"""Shared test plumbing: fixture loading and pipeline construction."""

from importlib import resources
from pathlib import Path

import numpy as np

from tenstream import check, factorize_contractions, from_ast, parse
from tenstream.formats import Float64
from tenstream.lowering import lower_schedule
from tenstream.scheduler import partition

FIXTURES = Path(resources.files("tenstream") / "fixtures")


def load_fixture(name: str) -> str:
    return (FIXTURES / f"{name}.cfd").read_text()


def typed_fixture(name: str, p: int | None = None):
    bindings = {"p": p} if p is not None else {}
    return check(parse(load_fixture(name), name, bindings))


def graph_fixture(name: str, p: int | None = None, factorized: bool = True):
    g = from_ast(typed_fixture(name, p))
    return factorize_contractions(g) if factorized else g


def kernel_fixture(name: str, p: int | None = None, groups: int | None = None,
                   fmt=Float64()):
    g = graph_fixture(name, p)
    sched = partition(g, groups, scalar_bits=fmt.width_bits)
    return g, sched, lower_schedule(sched, fmt)


def random_inputs(typed, rng, lo=-1.0, hi=1.0):
    return {d.name: rng.uniform(lo, hi, size=d.shape) for d in typed.inputs()}


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error of a against reference b."""
    scale = max(float(np.max(np.abs(b))), 1e-30)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) / scale
