import ctypes
import math

import pytest

from xflow.agent import NativeAgent

PLT_LAZY, PLT_EAGER, DYN_GOT, DLSYM = range(4)
ENTRY_SIZE = 160

HASH_ARGS = ctypes.CFUNCTYPE(ctypes.c_float, *([ctypes.c_long] * 8 + [ctypes.c_double] * 8))
ADD = ctypes.CFUNCTYPE(ctypes.c_long, ctypes.c_long, ctypes.c_long)


@pytest.fixture(scope="module")
def fxa(fx):
    return ctypes.CDLL(str(fx.lib("fx_a")))


@pytest.fixture
def ctx(native):
    c = native.test_context()
    assert c
    yield c
    native.test_free_context(c)


@pytest.fixture
def thread_ctx(native):
    """The calling thread's registered context, as the thread wrapper would install it."""
    c = native.test_init_thread(0)
    assert c
    yield c
    assert native.shadow_depth(c) == 0


def site_for(native: NativeAgent, fn, name: bytes) -> int:
    addr = ctypes.cast(fn, ctypes.c_void_p).value
    sid = native.test_make_site(addr, name)
    assert sid >= 0
    return sid


@pytest.mark.parametrize("kind", [PLT_LAZY, PLT_EAGER, DYN_GOT, DLSYM])
@pytest.mark.parametrize("rate", [1, 16, 2**31 - 1])
def test_codegen_fits_entry_and_is_deterministic(native, kind, rate):
    code, seg = native.codegen(7, kind, rate)
    assert code == native.codegen(7, kind, rate)[0]
    assert len(code) == sum(seg) <= ENTRY_SIZE
    assert seg[0] == 20
    # segment A: load the thread context through %fs
    assert code[:5] == bytes.fromhex("644c8b1c25")
    if kind == PLT_LAZY:
        assert seg[3] > 13  # post-return segment plus the resolver stub
    else:
        assert seg[3] == 12


def test_codegen_gate_only_when_sampling(native):
    _, untimed = native.codegen(3, DLSYM, 1)
    _, gated = native.codegen(3, DLSYM, 8)
    assert gated[1] > untimed[1]


def test_codegen_differs_per_site(native):
    a, _ = native.codegen(1, DLSYM, 1)
    b, _ = native.codegen(2, DLSYM, 1)
    assert a != b and len(a) == len(b)


def test_entry_without_context_bypasses(native, fxa):
    sid = site_for(native, fxa.fx_add, b"fx_add")
    native.test_clear_thread()
    f = ADD(native.site_code(sid))
    assert f(20, 22) == 42


def test_entry_preserves_arguments_and_float_return(native, fxa, thread_ctx):
    direct = HASH_ARGS(ctypes.cast(fxa.fx_hash_args, ctypes.c_void_p).value)
    sid = site_for(native, fxa.fx_hash_args, b"fx_hash_args")
    shadow = HASH_ARGS(native.site_code(sid))
    cases = [
        (1, -1, 2, -(2**63), 4, 2**63 - 1, 6, 7, 0.5, -1.25, 1e300, -0.0, math.pi, math.e, 1e-300, 9.0),
        tuple(range(8)) + tuple(float(i) / 3 for i in range(8)),
    ]
    for args in cases:
        assert shadow(*args) == direct(*args)
    count, timed, raw, attr = native.row(thread_ctx, sid)
    assert count == 2 and timed == 2
    assert raw > 0 and attr == raw


def test_busy_context_is_counted_but_not_traced(native, fxa, thread_ctx):
    sid = site_for(native, fxa.fx_add, b"fx_add")
    f = ADD(native.site_code(sid))
    native.test_set_busy(thread_ctx, 1)
    try:
        assert f(1, 2) == 3
    finally:
        native.test_set_busy(thread_ctx, 0)
    assert native.row(thread_ctx, sid) == (0, 0, 0, 0)
    assert f(1, 2) == 3
    assert native.row(thread_ctx, sid)[0] == 1


def test_sampling_gate_times_one_in_n(native, fxa, thread_ctx):
    native.test_configure(4, 0, None)
    try:
        sid = site_for(native, fxa.fx_add, b"fx_add")
    finally:
        native.test_configure(1, 0, None)
    f = ADD(native.site_code(sid))
    for i in range(40):
        assert f(i, 1) == i + 1
    count, timed, _, _ = native.row(thread_ctx, sid)
    assert count == 40
    assert timed == 10


def _slots(n):
    return (ctypes.c_uint64 * n)()


def test_enter_exit_restores_return_and_folds(native, ctx):
    sid = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"strlen")
    slots = _slots(4)
    slot = ctypes.byref(slots, 8 * 2)
    slots[2] = 0xDEAD
    assert native.test_enter(ctx, sid, slot, 1000) == 0
    assert slots[2] == native.post_addr(sid)
    assert native.shadow_depth(ctx) == 1
    assert native.test_exit(ctx, sid, slot, 1600) == 0xDEAD
    assert native.shadow_depth(ctx) == 0
    assert native.row(ctx, sid)[1:] == (1, 600, 600)


def test_parallel_phase_divides_by_active_threads(native, ctx):
    sid = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"strlen")
    slots = _slots(2)
    slot = ctypes.byref(slots, 8)
    native.test_set_active(4)
    try:
        native.test_enter(ctx, sid, slot, 0x1000)
        native.test_exit(ctx, sid, slot, 0x1000 + 1000)
        native.test_enter(ctx, sid, slot, 0x1000)
        native.test_exit(ctx, sid, slot, 0x1000 + 1002)  # 250.5 rounds up
    finally:
        native.test_set_active(1)
    assert native.row(ctx, sid)[1:] == (2, 2002, 250 + 251)


def test_nested_frames_unwind_in_order(native, ctx):
    outer = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"outer")
    inner = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"inner")
    slots = _slots(8)
    slots[6], slots[2] = 111, 222
    hi, lo = ctypes.byref(slots, 48), ctypes.byref(slots, 16)
    native.test_enter(ctx, outer, hi, 10)
    native.test_enter(ctx, inner, lo, 20)
    assert native.shadow_depth(ctx) == 2
    assert native.test_exit(ctx, inner, lo, 30) == 222
    assert native.test_exit(ctx, outer, hi, 50) == 111
    assert native.row(ctx, inner)[2] == 10
    assert native.row(ctx, outer)[2] == 40


def test_tail_jump_replaces_frame(native, ctx):
    first = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"chain1")
    second = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"chain2")
    slots = _slots(4)
    slot = ctypes.byref(slots, 8)
    slots[1] = 0xBEEF
    assert native.test_enter(ctx, first, slot, 5) == 0
    # the first API jumps to the second without a new call: same slot, holding our post address
    assert native.test_enter(ctx, second, slot, 100) == 1
    assert native.shadow_depth(ctx) == 1
    assert slots[1] == native.post_addr(second)
    assert native.test_exit(ctx, second, slot, 160) == 0xBEEF
    assert native.row(ctx, first)[1] == 1
    assert native.row(ctx, second)[1:3] == (1, 60)
    assert native.shadow_depth(ctx) == 0


def test_stale_frames_dropped_after_nonlocal_exit(native, ctx):
    sid = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"jumper")
    slots = _slots(8)
    deep, shallow = ctypes.byref(slots, 8), ctypes.byref(slots, 48)
    native.test_enter(ctx, sid, deep, 1)  # never returns (longjmp past it)
    slots[6] = 77
    native.test_enter(ctx, sid, shallow, 2)
    assert native.shadow_depth(ctx) == 1
    assert native.frame_slot(ctx, 0) == ctypes.addressof(slots) + 48
    assert native.test_exit(ctx, sid, shallow, 3) == 77
    assert native.shadow_depth(ctx) == 0


def test_overflow_counts_without_timing(native):
    native.test_configure(0, 2, None)
    try:
        ctx = native.test_context()
    finally:
        native.test_configure(0, 4096, None)
    try:
        sid = site_for(native, ctypes.cast(ctypes.CDLL(None).strlen, ctypes.c_void_p), b"deep")
        slots = _slots(8)
        refs = [ctypes.byref(slots, 8 * k) for k in (7, 5, 3)]
        assert native.test_enter(ctx, sid, refs[0], 1) == 0
        assert native.test_enter(ctx, sid, refs[1], 1) == 0
        assert native.test_enter(ctx, sid, refs[2], 1) == 2
        assert native.shadow_depth(ctx) == 2
    finally:
        native.test_free_context(ctx)


def test_record_respects_busy_flag(native, ctx):
    native.test_record(ctx, 3, 500)
    native.test_set_busy(ctx, 1)
    native.test_record(ctx, 3, 500)
    native.test_set_busy(ctx, 0)
    assert native.row(ctx, 3) == (0, 1, 500, 500)
