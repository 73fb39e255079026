"""Compile the emitted C99 with a host compiler and compare against the
reference interpreter.  This closes the loop on the code generator: the
kernel text, the portable runtime header, and the fixed-point helpers
all get exercised for real."""

import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from tenstream import tensor_ir as tir
from tenstream.formats import Fixed, Float64
from tenstream.lowering import RUNTIME_HEADER_NAME, emit_c

from helpers import kernel_fixture, random_inputs, rel_err, typed_fixture

CC = shutil.which("cc") or shutil.which("gcc")
pytestmark = pytest.mark.skipif(CC is None, reason="no C compiler")

RT_HEADER = Path(__file__).resolve().parents[1] / "src/tenstream/runtime" / \
    RUNTIME_HEADER_NAME


def _scan_fn(fmt):
    if isinstance(fmt, Fixed):
        return "%ld" if fmt.width_bits > 32 else "%d", "%ld\\n", \
            "(long)" if fmt.width_bits > 32 else "(long)"
    return "%lf", "%.17g\\n", ""


def _build_harness(tmp_path, kern, name, fmt, sizes_in, size_out):
    (tmp_path / f"{name}.c").write_text(emit_c(kern, name))
    shutil.copy(RT_HEADER, tmp_path / RUNTIME_HEADER_NAME)
    scan, prnt, cast = _scan_fn(fmt)
    args_in = ", ".join(n for n, _ in sizes_in)
    decls = "\n".join(
        f"    static ts_scalar {n}[{sz}];" for n, sz in sizes_in)
    reads = "\n".join(
        f"    for (int i = 0; i < {sz}; i++) "
        f"if (scanf(\"{scan}\", &{n}[i]) != 1) return 1;"
        for n, sz in sizes_in)
    if isinstance(fmt, Fixed) and fmt.width_bits > 32:
        scan_type = "long v; "
        reads = "\n".join(
            f"    for (int i = 0; i < {sz}; i++) {{ long v; "
            f"if (scanf(\"%ld\", &v) != 1) return 1; {n}[i] = (ts_scalar)v; }}"
            for n, sz in sizes_in)
    main = f"""#include <stdio.h>
#include "{name}.c"

int main(void) {{
    static ts_scalar out[{size_out}];
{decls}
{reads}
    {name}_top({args_in}, out);
    for (int i = 0; i < {size_out}; i++) printf("{prnt}", {cast}out[i]);
    return 0;
}}
"""
    (tmp_path / "main.c").write_text(main)
    subprocess.run([CC, "-std=c99", "-O2", "-o", str(tmp_path / "harness"),
                    str(tmp_path / "main.c"), "-lm"], check=True,
                   capture_output=True)
    return tmp_path / "harness"


def _feed(fmt, kern, inputs):
    vals = []
    for name, _ in kern.input_feeds:
        arr = np.asarray(inputs[name], dtype=np.float64).reshape(-1)
        if isinstance(fmt, Fixed):
            vals.extend(str(int(v)) for v in fmt.encode(arr))
        else:
            vals.extend("%.17g" % v for v in arr)
    return "\n".join(vals)


def _run_case(tmp_path, name, p, fmt, seed, rtol):
    g, sched, kern = kernel_fixture(name, p, fmt=fmt)
    tp = typed_fixture(name, p)
    sizes_in = [(n, kern.streams[s].words) for n, s in kern.input_feeds]
    out_name, out_stream = kern.output_drains[0]
    harness = _build_harness(tmp_path, kern, name, fmt, sizes_in,
                             kern.streams[out_stream].words)
    rng = np.random.default_rng(seed)
    ins = random_inputs(tp, rng)
    ref = tir.eval_reference(g, ins, fmt)
    res = subprocess.run([str(harness)], input=_feed(fmt, kern, ins),
                         capture_output=True, text=True, check=True)
    if isinstance(fmt, Fixed):
        raw = np.array([int(x) for x in res.stdout.split()], dtype=object)
        got = fmt.decode(raw).reshape(ref[out_name].shape)
        assert np.array_equal(got, ref[out_name])  # bit exact
    else:
        got = np.array([float(x) for x in res.stdout.split()]) \
            .reshape(ref[out_name].shape)
        assert rel_err(got, ref[out_name]) < rtol


def test_emitted_c_float64_helmholtz(tmp_path):
    _run_case(tmp_path, "helmholtz", 3, Float64(), seed=1, rtol=1e-13)


def test_emitted_c_float64_seven_groups(tmp_path):
    g, sched, kern = kernel_fixture("helmholtz", 3, groups=7)
    tp = typed_fixture("helmholtz", 3)
    sizes_in = [(n, kern.streams[s].words) for n, s in kern.input_feeds]
    out_name, out_stream = kern.output_drains[0]
    harness = _build_harness(tmp_path, kern, "helm7", Float64(), sizes_in,
                             kern.streams[out_stream].words)
    rng = np.random.default_rng(5)
    ins = random_inputs(tp, rng)
    ref = tir.eval_reference(g, ins)
    res = subprocess.run([str(harness)],
                         input=_feed(Float64(), kern, ins),
                         capture_output=True, text=True, check=True)
    got = np.array([float(x) for x in res.stdout.split()]) \
        .reshape(ref[out_name].shape)
    assert rel_err(got, ref[out_name]) < 1e-13


def test_emitted_c_fixed32_bit_exact(tmp_path):
    _run_case(tmp_path, "helmholtz", 3, Fixed(8, 24), seed=2, rtol=0)


def test_emitted_c_fixed64_bit_exact(tmp_path):
    _run_case(tmp_path, "helmholtz", 2, Fixed(24, 40), seed=3, rtol=0)
