import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foundry import binfmt
from foundry.driver import (
    DeviceContext,
    DriverLane,
    EmptyOp,
    IntervalSet,
    Launch,
    LoadVariant,
    Memcpy,
    Memset,
    RecordEvent,
    WaitEvent,
    node_ids,
)
from foundry.errors import (
    CaptureError,
    DeviceStateUninitializedError,
    DriverError,
    TopologyMismatchError,
    UnmappedAddressError,
    UnresolvedKernelError,
)
from foundry.graph import (
    DEFAULT_ATTRS,
    FuncAttrs,
    GraphNode,
    KernelNodeAttrs,
    KernelNodeParams,
    MemcpyParams,
    NodeType,
    construction_calls,
    make_graph,
    param_set,
)
from foundry.hashing import content_hash

BASE = 0x7000_0000_0000


def _binary(flags=0, hidden=(8,)):
    entries = (
        binfmt.KernelEntry("gemm", 64, hidden, FuncAttrs(1024, -1, 0, 0, 0, 0)),
        binfmt.KernelEntry("norm", 32, (), FuncAttrs()),
    )
    return binfmt.encode(binfmt.SimBinary(entries, b"code", flags=flags))


def _ctx_with_memory():
    ctx = DeviceContext(DriverLane())
    ctx.reserve_va(BASE, 1 << 24)
    ctx.map_range(BASE, 1 << 20)
    return ctx


def _args(addr, n=64):
    buf = bytearray(n)
    buf[8:16] = addr.to_bytes(8, "little")
    return bytes(buf)


# -- interval set -------------------------------------------------------------


@given(st.lists(st.tuples(st.integers(0, 200), st.integers(1, 20)), max_size=30))
def test_interval_set_matches_a_byte_model(ops):
    s = IntervalSet()
    model = set()
    for start, length in ops:
        span = set(range(start, start + length))
        if span & model:
            with pytest.raises(DriverError):
                s.add(start, start + length)
        else:
            s.add(start, start + length)
            model |= span
    for addr in range(0, 230):
        assert s.covers(addr) == (addr in model)


def test_interval_set_remove_carves_middle():
    s = IntervalSet()
    s.add(0, 100)
    s.remove(40, 60)
    assert s.ranges() == [(0, 40), (60, 100)]
    with pytest.raises(DriverError):
        s.remove(30, 50)


# -- memory -------------------------------------------------------------------


def test_map_outside_reservation_is_rejected():
    ctx = DeviceContext()
    ctx.reserve_va(BASE, 1 << 20)
    with pytest.raises(DriverError):
        ctx.map_range(BASE + (1 << 20), 4096)
    ctx.map_range(BASE, 4096)
    assert ctx.is_mapped(BASE + 4095) and not ctx.is_mapped(BASE + 4096)
    assert ctx.counters["alloc"] == 2


# -- modules --------------------------------------------------------------------


def test_load_module_variants_and_hash(tmp_path):
    ctx = DeviceContext()
    payload = _binary()
    path = tmp_path / "k.bin"
    path.write_bytes(payload)
    m1 = ctx.load_module(payload)
    m2 = ctx.load_module(path, LoadVariant.FILE)
    m3 = ctx.load_module(payload, LoadVariant.WITH_OPTIONS, b"-O3")
    assert {ctx.module_hash(m) for m in (m1, m2, m3)} == {content_hash(payload)}
    assert ctx.counters["module"] == 3
    assert ctx.kernel(ctx.get_function(m1, "gemm")).arg_size == 64
    with pytest.raises(UnresolvedKernelError):
        ctx.get_function(m1, "missing")


def test_unload_falls_back_to_a_duplicate_module():
    ctx = DeviceContext()
    payload = _binary()
    m1 = ctx.load_module(payload)
    m2 = ctx.load_module(payload)
    ref = ctx.kernel(ctx.get_function(m1, "gemm")).ref
    assert ctx.kernel(ctx.resolve(ref)).module == m1
    ctx.unload_module(m1)
    assert ctx.kernel(ctx.resolve(ref)).module == m2
    ctx.unload_module(m2)
    with pytest.raises(UnresolvedKernelError):
        ctx.resolve(ref)


def test_device_init_only_for_flagged_modules():
    ctx = DeviceContext()
    plain = ctx.load_module(_binary())
    with pytest.raises(DriverError):
        ctx.device_init(plain)
    flagged = ctx.load_module(_binary(binfmt.FLAG_NEEDS_DEVICE_INIT))
    ctx.device_init(flagged)
    assert ctx.counters["device_init"] == 1


# -- capture ----------------------------------------------------------------------


def _explicit_graph(ctx, work, label=0):
    """Independent construction: a fork/join DAG built by hand."""
    ids = node_ids(work)
    nodes = []
    for i, item in enumerate(work):
        if i not in ids:
            continue
        nid = ids[i]
        if isinstance(item, Launch):
            k = ctx.kernel(item.kernel)
            p = KernelNodeParams(item.grid, item.block, item.shared_mem, k.ref, item.args, k.func_attrs)
            nodes.append(GraphNode(nid, NodeType.KERNEL, p, item.attrs))
        elif isinstance(item, Memcpy):
            nodes.append(GraphNode(nid, NodeType.MEMCPY, MemcpyParams(item.dst, item.src, item.nbytes)))
        else:
            raise AssertionError(item)
    return make_graph(label, nodes, [(0, 1), (0, 2), (1, 3), (2, 3)])


def test_capture_matches_explicit_construction():
    ctx = _ctx_with_memory()
    mod = ctx.load_module(_binary())
    gemm, norm = ctx.get_function(mod, "gemm"), ctx.get_function(mod, "norm")
    work = [
        Memcpy(BASE, BASE + 4096, 128),
        RecordEvent(1, 0),
        WaitEvent(1, 1),
        Launch(norm, (1, 1, 1), (32, 1, 1), 0, bytes(32), stream=1),
        RecordEvent(2, 1),
        Launch(gemm, (2, 62, 1), (384, 1, 1), 206044, _args(BASE)),
        WaitEvent(2, 0),
        Launch(gemm, (1, 1, 1), (128, 1, 1), 0, _args(BASE + 64)),
    ]
    captured = ctx.stream_capture(work, label=5)
    assert captured == _explicit_graph(ctx, work, label=5)
    assert ctx.counters["capture"] == 1
    assert ctx.counters["graph_mutation"] == 0


def test_capture_rejects_unjoined_side_stream():
    ctx = _ctx_with_memory()
    mod = ctx.load_module(_binary())
    norm = ctx.get_function(mod, "norm")
    work = [RecordEvent(1, 0), WaitEvent(1, 1), Launch(norm, (1, 1, 1), (1, 1, 1), 0, bytes(32), stream=1)]
    with pytest.raises(CaptureError):
        ctx.stream_capture(work)
    with pytest.raises(CaptureError):
        ctx.stream_capture([Launch(norm, (1, 1, 1), (1, 1, 1), 0, bytes(32), stream=3)])


def test_capture_of_unloaded_kernel_aborts():
    ctx = _ctx_with_memory()
    with pytest.raises(UnresolvedKernelError, match="capture aborted"):
        ctx.stream_capture([Launch(999, (1, 1, 1), (1, 1, 1), 0, bytes(8))])


# -- construction, update, replay ------------------------------------------------------


def _simple_graph(ctx, label, addr, attrs=DEFAULT_ATTRS, grid=(1, 1, 1)):
    mod = ctx.load_module(_binary())
    gemm = ctx.get_function(mod, "gemm")
    work = [
        Launch(gemm, grid, (128, 1, 1), 0, _args(addr), attrs),
        Memset(BASE, 0, 256),
        EmptyOp(),
    ]
    return ctx.stream_capture(work, label)


def test_build_counts_one_call_per_node_edge_and_attribute():
    ctx = _ctx_with_memory()
    attrs = KernelNodeAttrs(cluster_dim=(2, 1, 1), cluster_scheduling_policy=1)
    g = _simple_graph(ctx, 1, BASE, attrs)
    before = ctx.counters["graph_mutation"]
    handle = ctx.build_graph(g)
    assert ctx.counters["graph_mutation"] - before == 3 + 2 + 2 == construction_calls(g)
    exe = ctx.instantiate(handle)
    assert ctx.counters["instantiate"] == 1
    assert exe.snapshot() == param_set(g)


def test_update_touches_only_changed_nodes():
    ctx = _ctx_with_memory()
    g1 = _simple_graph(ctx, 1, BASE)
    g2 = _simple_graph(ctx, 2, BASE + 512, grid=(4, 1, 1))
    exe = ctx.instantiate(ctx.build_graph(g1))
    mutations = ctx.counters["graph_mutation"]
    ctx.exec_update(exe, g2)
    assert ctx.counters["update"] == 1
    assert ctx.counters["update_nodes"] == 1
    assert ctx.counters["graph_mutation"] == mutations
    assert exe.label == 2 and exe.params[0].grid == (4, 1, 1)


def test_update_with_other_topology_is_rejected_and_leaves_exec_alone():
    ctx = _ctx_with_memory()
    g1 = _simple_graph(ctx, 1, BASE)
    g2 = _simple_graph(ctx, 2, BASE, KernelNodeAttrs(cluster_dim=(2, 1, 1)))
    exe = ctx.instantiate(ctx.build_graph(g1))
    before = list(exe.params)
    with pytest.raises(TopologyMismatchError):
        ctx.exec_update(exe, g2)
    assert exe.params == before and ctx.counters["update"] == 0


def test_replay_checks_hidden_offsets_against_mapped_memory():
    ctx = _ctx_with_memory()
    ok = ctx.instantiate(ctx.build_graph(_simple_graph(ctx, 1, BASE + 100)))
    trace = ctx.replay(ok)
    assert trace.records[0].addresses == (BASE + 100,)
    stale = ctx.instantiate(ctx.build_graph(_simple_graph(ctx, 2, BASE + (1 << 20))))
    with pytest.raises(UnmappedAddressError) as err:
        ctx.replay(stale)
    assert (err.value.node_id, err.value.offset, err.value.address) == (0, 8, BASE + (1 << 20))


def test_replay_requires_device_init():
    ctx = _ctx_with_memory()
    mod = ctx.load_module(_binary(binfmt.FLAG_NEEDS_DEVICE_INIT))
    gemm = ctx.get_function(mod, "gemm")
    g = ctx.stream_capture([Launch(gemm, (1, 1, 1), (1, 1, 1), 0, _args(BASE))])
    exe = ctx.instantiate(ctx.build_graph(g))
    with pytest.raises(DeviceStateUninitializedError):
        ctx.replay(exe)
    ctx.device_init(mod)
    ctx.replay(exe)


def test_graph_from_one_context_does_not_resolve_in_another():
    ctx = _ctx_with_memory()
    g = _simple_graph(ctx, 1, BASE)
    fresh = _ctx_with_memory()
    with pytest.raises(UnresolvedKernelError) as err:
        fresh.build_graph(g)
    assert err.value.node_id == 0


def test_replay_checks_memory_operation_ranges():
    ctx = _ctx_with_memory()
    g = ctx.stream_capture([Memcpy(BASE, BASE + (1 << 20) - 8, 64)])
    with pytest.raises(UnmappedAddressError):
        ctx.replay(ctx.instantiate(ctx.build_graph(g)))


# -- driver lane ---------------------------------------------------------------------


def test_lane_serializes_and_reports_contention():
    lane = DriverLane(penalty_per_waiter=1)
    ctx = DeviceContext(lane)
    ctx.reserve_va(BASE, 1 << 20)
    ctx.map_range(BASE, 1 << 20)
    g = _simple_graph(ctx, 1, BASE)
    barrier = threading.Barrier(4)

    def worker():
        barrier.wait()
        for _ in range(50):
            ctx.build_graph(g)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert lane.max_holders == 1
    assert len(ctx.mutation_threads) == 4
    assert ctx.counters["graph_mutation"] == 4 * 50 * construction_calls(g)
