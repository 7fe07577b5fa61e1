import struct
from dataclasses import replace

import pytest

from foundry import pipeline
from foundry.errors import ArchiveCorruptionError, UnpatchableCommError
from foundry.graph import KernelRef, NodeType, diff
from foundry.rankforge import (
    COMM_ARG_SIZE,
    RANK_OFFSET,
    WORLD_OFFSET,
    WORLD_PLACEHOLDER,
    PatchTable,
    comm_args,
    instantiate_rank,
    patch_graph,
    verify_rank_uniformity,
)
from foundry.workload import WorkloadSpec, preset

SPMD = WorkloadSpec(
    name="spmd4", seed=3, max_batch=4, layers=4, thresholds=(2,), comm_mode="spmd", collectives_per_layer=2,
    kv_cache_bytes=1 << 20, weight_bytes_per_layer=64 << 10,
)


@pytest.fixture(scope="module")
def spmd():
    return pipeline.capture(SPMD)


def _u64(buf, off):
    return struct.unpack_from("<Q", buf, off)[0]


def test_dense_workload_has_empty_table():
    saved = pipeline.capture(preset("micro"))
    assert not saved.patch_table and saved.patch_table.total_entries() == 0
    assert instantiate_rank(saved.graphs, saved.patch_table, 3, 4) == saved.graphs


def test_one_entry_per_collective(spmd):
    table = spmd.patch_table
    assert sorted(table.graphs) == [1, 2, 3, 4]
    for label in table.graphs:
        assert len(table.entries_for(label)) == 2 * 4
    for g in spmd.graphs:
        for e in table.entries_for(g.label):
            node = g.nodes[e.node_id]
            assert node.params.kernel == e.stub
            assert _u64(node.params.args, RANK_OFFSET) == 0
            assert _u64(node.params.args, WORLD_OFFSET) == WORLD_PLACEHOLDER


def test_patch_rewrites_kernel_and_rank_fields_only(spmd):
    table = spmd.patch_table
    g = spmd.graphs[0]
    patched = patch_graph(g, table.entries_for(g.label), table.real_hash, 2, 4)
    d = diff(g, patched)
    assert d.topology_equal
    touched = {e.node_id for e in table.entries_for(g.label)}
    assert {x.node_id for x in d.param_deltas} == touched
    for x in d.param_deltas:
        if x.field == "args":
            assert all(WORLD_OFFSET + 8 >= t and s >= RANK_OFFSET for s, t in x.after)
        else:
            assert x.field == "kernel"
    for e in table.entries_for(g.label):
        assert patched.nodes[e.node_id].params.kernel.binary_hash == table.real_hash
        args = patched.nodes[e.node_id].params.args
        assert (_u64(args, RANK_OFFSET), _u64(args, WORLD_OFFSET)) == (2, 4)
        assert args[16:] == g.nodes[e.node_id].params.args[16:]


def test_rank_instances_are_uniform(spmd):
    table = spmd.patch_table
    instances = {r: instantiate_rank(spmd.graphs, table, r, 8) for r in range(8)}
    report = verify_rank_uniformity(instances, table, {r: [1, 2] for r in range(8)})
    assert report.uniform and report.ranks == 8


def test_perturbed_rank_is_reported_with_node_and_offset(spmd):
    table = spmd.patch_table
    instances = {r: instantiate_rank(spmd.graphs, table, r, 4) for r in range(4)}
    g = instances[2][1]
    victim = next(n for n in g.nodes if n.type == NodeType.KERNEL and n.id not in {e.node_id for e in table.entries_for(g.label)})
    args = bytearray(victim.params.args)
    args[24] ^= 1
    nodes = list(g.nodes)
    nodes[victim.id] = replace(victim, params=replace(victim.params, args=bytes(args)))
    instances[2][1] = type(g)(g.label, tuple(nodes), g.edges)
    report = verify_rank_uniformity(instances, table, {0: [1], 1: [1], 2: [1], 3: [9]})
    assert not report.uniform
    assert f"rank 2 graph {g.label} node {victim.id}: args differs bytes [(24, 25)]" in report.divergences
    assert "rank 3: binary catalog differs from rank 0" in report.divergences


def test_stray_bytes_inside_a_patched_node_are_caught(spmd):
    table = spmd.patch_table
    instances = {r: instantiate_rank(spmd.graphs, table, r, 2) for r in range(2)}
    g = instances[1][0]
    e = table.entries_for(g.label)[0]
    node = g.nodes[e.node_id]
    args = bytearray(node.params.args)
    args[40] ^= 0xFF
    nodes = list(g.nodes)
    nodes[e.node_id] = replace(node, params=replace(node.params, args=bytes(args)))
    instances[1][0] = type(g)(g.label, tuple(nodes), g.edges)
    report = verify_rank_uniformity(instances, table)
    assert report.divergences == [f"rank 1 graph {g.label} node {e.node_id}: argument bytes [40, 41) differ"]


def test_patch_table_round_trip(spmd):
    data = spmd.patch_table.to_bytes()
    assert PatchTable.from_bytes(data) == spmd.patch_table
    assert PatchTable.from_bytes(PatchTable().to_bytes()) == PatchTable()
    with pytest.raises(ArchiveCorruptionError):
        PatchTable.from_bytes(data[:-2])
    with pytest.raises(ArchiveCorruptionError):
        PatchTable.from_bytes(b"XXXX" + data[4:])


def test_patch_entry_on_wrong_node_is_corruption(spmd):
    table = spmd.patch_table
    g = spmd.graphs[0]
    e = table.entries_for(g.label)[0]
    bad = replace(e, stub=KernelRef(e.stub.binary_hash, "elsewhere"))
    with pytest.raises(ArchiveCorruptionError):
        patch_graph(g, [bad], table.real_hash, 0, 1)


def test_rank_bounds(spmd):
    for rank, world in ((4, 4), (-1, 2), (0, 0)):
        with pytest.raises(ValueError):
            instantiate_rank(spmd.graphs, spmd.patch_table, rank, world)


def test_comm_args_layout():
    args = comm_args("all_reduce", 0x10, 0x20, 5, 0x30, rank=3, world=8)
    assert len(args) == COMM_ARG_SIZE
    assert struct.unpack_from("<QQQQQQ", args) == (3, 8, 0x10, 0x20, 5, 0x30)


def test_collective_outside_the_stub_layer_fails_save(tmp_path):
    with pytest.raises(UnpatchableCommError) as err:
        pipeline.save(replace(SPMD, raw_comm=True), tmp_path / "a")
    assert err.value.phase == "capture"
    assert not (tmp_path / "a").exists()
