import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tenstream import system_builder as sysb
from tenstream.formats import Fixed, Float64

from helpers import typed_fixture


@pytest.fixture(scope="module")
def board():
    return sysb.default_board()


def test_default_board_matches_platform_table(board):
    assert board.hbm_channels == 32
    assert board.channel_capacity_bytes == 268_435_456
    assert board.bus_width_bits == 256
    assert board.hbm_frequency_mhz == 450
    assert board.bram == (507, 468, 512)
    assert board.uram == (320, 320, 320)
    assert board.dsp == (2733, 2877, 2880)
    assert board.lut == (369_000, 333_000, 367_000)
    assert board.ff == (746_000, 675_000, 729_000)


def test_element_bytes_helmholtz_p11():
    tp = typed_fixture("helmholtz", p=11)
    in_b, out_b = sysb.element_bytes(tp, Float64())
    assert in_b == (121 + 1331 + 1331) * 8 == 22_264
    assert out_b == 1331 * 8


# ------------------------------------------------------------ batches

def test_plan_batch_worked_example(board):
    small = sysb.BoardSpec("b", 32, 1024, 256, 450, 126,
                           (1,), (1,), (1,), (1,), (1,))
    plan = sysb.plan_batch(small, element_in_bytes=100, element_out_bytes=10,
                           n_eq=100, lanes=4)
    assert plan.batch_elements == 8
    assert plan.n_batches == 13


def test_plan_batch_golden_p11(board):
    tp = typed_fixture("helmholtz", p=11)
    in_b, out_b = sysb.element_bytes(tp, Float64())
    plan = sysb.plan_batch(board, in_b, out_b, n_eq=2_000_000, lanes=4)
    # locked by independent integer arithmetic:
    # floor(268435456 / 22264) = 12056, already a multiple of 4
    assert plan.batch_elements == 12_056
    assert plan.n_batches == 166
    assert plan.iterations == 166


def test_plan_batch_element_too_large(board):
    small = sysb.BoardSpec("b", 32, 64, 256, 450, 126,
                           (1,), (1,), (1,), (1,), (1,))
    with pytest.raises(sysb.SystemError):
        sysb.plan_batch(small, 100, 10, n_eq=10, lanes=1)


@given(st.integers(1, 10 ** 7), st.integers(1, 10 ** 5),
       st.sampled_from([1, 2, 4, 8]), st.integers(1, 10 ** 7))
@settings(max_examples=300, deadline=None)
def test_plan_batch_invariants(capacity, in_bytes, lanes, n_eq):
    board = sysb.BoardSpec("b", 32, capacity, 256, 450, 126,
                           (1,), (1,), (1,), (1,), (1,))
    try:
        plan = sysb.plan_batch(board, in_bytes, in_bytes, n_eq, lanes)
    except sysb.SystemError:
        assert (capacity // in_bytes // lanes) == 0
        return
    e = plan.batch_elements
    assert e % lanes == 0
    assert e * in_bytes <= capacity
    assert (e + lanes) * in_bytes > capacity
    assert plan.n_batches * e >= n_eq
    assert plan.iterations * plan.n_cu >= plan.n_batches


# ------------------------------------------------------------ CU design

def test_build_cu_lane_counts(board):
    tp = typed_fixture("helmholtz", p=11)
    par = sysb.CuOptions(bus_parallel=True)
    assert sysb.build_cu("k", tp, Float64(), board, par).lanes == 4
    assert sysb.build_cu("k", tp, Fixed(8, 24), board, par).lanes == 8
    base = sysb.build_cu("k", tp, Float64(), board, sysb.CuOptions())
    assert base.lanes == 1
    assert base.channels_per_cu == 1
    assert base.bus_width_bits == 64


def test_build_cu_word_counts(board):
    tp = typed_fixture("helmholtz", p=11)
    cu = sysb.build_cu("k", tp, Float64(), board, sysb.CuOptions())
    assert cu.words_in == 121 + 1331 + 1331
    assert cu.words_out == 1331


def test_double_buffer_channel_roles(board):
    tp = typed_fixture("helmholtz", p=11)
    db = sysb.CuOptions(double_buffering=True)
    cu = sysb.build_cu("k", tp, Float64(), board, db, n_cu=1)
    assert cu.channel_roles == ("in_even", "in_odd", "out_even", "out_odd")
    cu8 = sysb.build_cu("k", tp, Float64(), board, db, n_cu=8)
    assert cu8.channel_roles == ("even", "odd")
    with pytest.raises(sysb.SystemError):
        sysb.build_cu("k", tp, Float64(), board, db, n_cu=17)


def test_assign_channels_single_cu_db(board):
    tp = typed_fixture("helmholtz", p=11)
    cu = sysb.build_cu("k", tp, Float64(), board,
                       sysb.CuOptions(double_buffering=True), n_cu=1)
    text = sysb.assign_channels(cu, board)
    lines = text.strip().split("\n")
    assert len(lines) == 4
    assert lines[0] == "sp=cu_0.m_axi_in_even:HBM[0]"
    assert lines[3] == "sp=cu_0.m_axi_out_odd:HBM[3]"


def test_assign_channels_sixteen_cus(board):
    tp = typed_fixture("helmholtz", p=11)
    cu = sysb.build_cu("k", tp, Float64(), board,
                       sysb.CuOptions(double_buffering=True), n_cu=16)
    text = sysb.assign_channels(cu, board)
    lines = text.strip().split("\n")
    assert len(lines) == 32
    used = {int(l.split("HBM[")[1].rstrip("]")) for l in lines}
    assert used == set(range(32))


def test_assign_channels_exhaustion(board):
    tp = typed_fixture("helmholtz", p=11)
    cu = sysb.build_cu("k", tp, Float64(), board,
                       sysb.CuOptions(double_buffering=True), n_cu=16)
    with pytest.raises(sysb.SystemError) as exc:
        sysb.assign_channels(cu, board, n_cu=17)
    assert "channel exhaustion" in str(exc.value)


def test_channel_maps_collision_free(board):
    tp = typed_fixture("helmholtz", p=7)
    for db in (False, True):
        cap = 16 if db else 32
        for n in range(1, cap + 1):
            cu = sysb.build_cu("k", tp, Float64(), board,
                               sysb.CuOptions(double_buffering=db), n_cu=n)
            if n * cu.channels_per_cu > 32:
                continue
            lines = sysb.assign_channels(cu, board).strip().split("\n")
            chans = [int(l.split("HBM[")[1].rstrip("]")) for l in lines]
            assert len(chans) == len(set(chans))
            assert all(0 <= c < 32 for c in chans)


# ------------------------------------------------------------ host plan

def _plan(board, n_eq, db, lanes=4, n_cu=1):
    tp = typed_fixture("helmholtz", p=7)
    in_b, out_b = sysb.element_bytes(tp, Float64())
    opts = sysb.CuOptions(double_buffering=db, bus_parallel=lanes > 1)
    cu = sysb.build_cu("k", tp, Float64(), board, opts, n_cu=n_cu)
    batch = sysb.plan_batch(board, in_b, out_b, n_eq, cu.lanes, n_cu=n_cu)
    return batch, cu, sysb.host_plan(batch, cu)


def test_host_plan_double_buffering_overlap(board):
    tp = typed_fixture("helmholtz", p=11)
    in_b, out_b = sysb.element_bytes(tp, Float64())
    cu = sysb.build_cu("k", tp, Float64(), board,
                       sysb.CuOptions(double_buffering=True, bus_parallel=True))
    batch = sysb.plan_batch(board, in_b, out_b, n_eq=2 * 12_056, lanes=4)
    assert batch.n_batches == 2
    plan = sysb.host_plan(batch, cu)
    steps = plan["steps"]
    runs = [s for s in steps if s["op"] == "run"]
    assert len(runs) == batch.n_batches
    # batch parity alternates ping/pong
    assert [r["channel_set"] for r in runs] == [0, 1]
    # batch 1 transfers in during the phase that runs batch 0
    t_in1 = next(s for s in steps if s["op"] == "transfer_in" and s["batch"] == 1)
    assert t_in1["phase"] == runs[0]["phase"]
    # batch 0 transfers out during the phase that runs batch 1
    t_out0 = next(s for s in steps if s["op"] == "transfer_out" and s["batch"] == 0)
    assert t_out0["phase"] == runs[1]["phase"]


def test_host_plan_order_per_batch(board):
    for db in (False, True):
        batch, cu, plan = _plan(board, n_eq=3 * 100_000, db=db)
        steps = plan["steps"]
        for b in range(batch.n_batches):
            idx = {op: i for i, s in enumerate(steps)
                   for op in [s["op"]] if s.get("batch") == b}
            assert idx["pack"] < idx["transfer_in"] < idx["run"] \
                < idx["transfer_out"] < idx["unpack"]


def test_host_plan_single_batch_degenerates(board):
    batch, cu, plan = _plan(board, n_eq=100, db=True)
    assert batch.n_batches == 1
    runs = [s for s in plan["steps"] if s["op"] == "run"]
    assert len(runs) == 1
    # no overlapping transfer in the run phase
    phase = runs[0]["phase"]
    others = [s for s in plan["steps"]
              if s.get("phase") == phase and s["op"] != "run"]
    assert others == []


def test_host_plan_fixed_point_conversions(board):
    tp = typed_fixture("helmholtz", p=7)
    fmt = Fixed(8, 24)
    in_b, out_b = sysb.element_bytes(tp, fmt)
    cu = sysb.build_cu("k", tp, fmt, board, sysb.CuOptions(bus_parallel=True))
    assert cu.lanes == 8
    batch = sysb.plan_batch(board, in_b, out_b, 10 ** 6, cu.lanes)
    plan = sysb.host_plan(batch, cu)
    ops = [s["op"] for s in plan["steps"]]
    assert "convert_in" in ops and "convert_out" in ops
    ci = ops.index("convert_in")
    assert ops[ci + 1] == "pack"


# ----------------------------------------------------------- interleave

def test_interleave_stripe_layout():
    lanes, e, w = 4, 8, 3
    data = np.arange(e * w).reshape(e, w)
    bus = sysb.interleave(data, lanes)
    # beat g*w + word carries word `word` of elements g*lanes..+3
    for g in range(e // lanes):
        for word in range(w):
            beat = bus[(g * w + word) * lanes:(g * w + word + 1) * lanes]
            expect = [data[g * lanes + l, word] for l in range(lanes)]
            assert list(beat) == expect


@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 16), st.integers(1, 40))
@settings(max_examples=200, deadline=None)
def test_interleave_round_trip(lanes, groups, words):
    e = lanes * groups
    rng = np.random.default_rng(lanes * 1000 + groups * 10 + words)
    data = rng.normal(size=(e, words))
    back = sysb.deinterleave(sysb.interleave(data, lanes), lanes, words)
    assert np.array_equal(back, data)


def test_interleave_rejects_ragged():
    with pytest.raises(sysb.SystemError):
        sysb.interleave(np.zeros((6, 3)), 4)
