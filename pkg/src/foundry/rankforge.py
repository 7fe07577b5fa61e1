"""Single-rank SAVE, multi-rank LOAD for SPMD workloads.

During SAVE a stub layer stands in for the communication library: every
collective is captured as a stub kernel whose argument layout the stub
layer wrote itself, so it knows where the rank and world-size fields sit.
LOAD swaps each stub for the real communication kernel and rewrites those
fields for the target rank. Nothing else in the graph changes.

``patch.bin`` layout, little-endian::

    magic "FNDP" | version u16 | reserved u16 | world placeholder u32
    stub binary hash u64 | real binary hash u64 | graph count u32
    per graph: label u32 | entry count u32, then per entry:
        node id u32 | stub hash u64 | stub name (u16 length + utf-8)
        real name (u16 length + utf-8) | field width u8
        rank-offset count u16, u32 each | world-offset count u16, u32 each
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from foundry import binfmt
from foundry.catalog import FLAG_COMM_REAL, FLAG_COMM_STUB
from foundry.driver import Launch, node_ids
from foundry.errors import ArchiveCorruptionError, FormatVersionError, UnpatchableCommError
from foundry.graph import DEFAULT_ATTRS, FuncAttrs, KernelRef, NodeType, diff

MAGIC = b"FNDP"
VERSION = 1
WORLD_PLACEHOLDER = 1
FIELD_WIDTH = 8

# Argument layout the stub layer authors (and the real kernels share).
RANK_OFFSET = 0
WORLD_OFFSET = 8
SEND_OFFSET = 16
RECV_OFFSET = 24
COUNT_OFFSET = 32
HEAP_OFFSET = 40
OP_OFFSET = 48
COMM_ARG_SIZE = 128
COMM_POINTERS = (SEND_OFFSET, RECV_OFFSET, HEAP_OFFSET)

COLLECTIVES = {
    "dispatch": ("foundry_stub_ep_dispatch", "ep_low_latency_dispatch_kernel"),
    "combine": ("foundry_stub_ep_combine", "ep_low_latency_combine_kernel"),
    "all_reduce": ("foundry_stub_all_reduce", "ncclDevKernel_AllReduce_Sum_bf16_RING_LL"),
}
_OP_CODES = {kind: i for i, kind in enumerate(COLLECTIVES)}

_COMM_FATTRS = FuncAttrs(49152, -1, 0, 0, 0, 0)


def comm_binaries():
    """Payloads of the stub library and the real communication library."""
    stub = binfmt.SimBinary(
        tuple(
            binfmt.KernelEntry(s, COMM_ARG_SIZE, COMM_POINTERS, _COMM_FATTRS) for s, _ in COLLECTIVES.values()
        ),
        code=b"foundry-comm-stub\x00" * 16,
        link_tag="comm-stub",
    )
    real = binfmt.SimBinary(
        tuple(
            binfmt.KernelEntry(r, COMM_ARG_SIZE, COMM_POINTERS, _COMM_FATTRS) for _, r in COLLECTIVES.values()
        ),
        code=b"sim-nvshmem-device-lib\x00" * 64,
        flags=binfmt.FLAG_NEEDS_DEVICE_INIT,
        link_tag="comm",
    )
    return binfmt.encode(stub), binfmt.encode(real)


def comm_args(kind, send, recv, count, heap, rank=0, world=WORLD_PLACEHOLDER) -> bytes:
    """Argument buffer of a collective, in the layout shared by stub and real kernels."""
    args = bytearray(COMM_ARG_SIZE)
    struct.pack_into("<QQQQQQI", args, 0, rank, world, send, recv, count, heap, _OP_CODES[kind])
    return bytes(args)


@dataclass(frozen=True)
class CommPatchEntry:
    node_id: int
    stub: KernelRef
    real_name: str
    rank_offsets: tuple = (RANK_OFFSET,)
    world_offsets: tuple = (WORLD_OFFSET,)
    width: int = FIELD_WIDTH


@dataclass
class PatchTable:
    stub_hash: int = 0
    real_hash: int = 0
    world_placeholder: int = WORLD_PLACEHOLDER
    graphs: dict = field(default_factory=dict)

    def entries_for(self, label):
        return self.graphs.get(label, ())

    def __bool__(self):
        return any(self.graphs.values())

    def total_entries(self):
        return sum(len(v) for v in self.graphs.values())

    def kernel_refs(self):
        refs = set()
        for entries in self.graphs.values():
            for e in entries:
                refs.add(e.stub)
                refs.add(KernelRef(self.real_hash, e.real_name))
        return refs

    def to_bytes(self) -> bytes:
        out = bytearray(struct.pack("<4sHHI", MAGIC, VERSION, 0, self.world_placeholder))
        out += struct.pack("<QQI", self.stub_hash, self.real_hash, len(self.graphs))
        for label in sorted(self.graphs):
            entries = self.graphs[label]
            out += struct.pack("<II", label, len(entries))
            for e in entries:
                out += struct.pack("<IQ", e.node_id, e.stub.binary_hash)
                for s in (e.stub.name, e.real_name):
                    raw = s.encode()
                    out += struct.pack("<H", len(raw)) + raw
                out += struct.pack("<BH", e.width, len(e.rank_offsets))
                out += b"".join(struct.pack("<I", o) for o in e.rank_offsets)
                out += struct.pack("<H", len(e.world_offsets))
                out += b"".join(struct.pack("<I", o) for o in e.world_offsets)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PatchTable":
        try:
            magic, version, _, world = struct.unpack_from("<4sHHI", data, 0)
            if magic != MAGIC:
                raise ArchiveCorruptionError(f"patch table has bad magic {magic!r}")
            if version != VERSION:
                raise FormatVersionError(f"patch table version {version} unsupported")
            stub_hash, real_hash, n_graphs = struct.unpack_from("<QQI", data, 12)
            pos = 32
            table = cls(stub_hash, real_hash, world)
            for _ in range(n_graphs):
                label, n = struct.unpack_from("<II", data, pos)
                pos += 8
                entries = []
                for _ in range(n):
                    nid, sh = struct.unpack_from("<IQ", data, pos)
                    pos += 12
                    names = []
                    for _ in range(2):
                        (ln,) = struct.unpack_from("<H", data, pos)
                        pos += 2
                        names.append(bytes(data[pos : pos + ln]).decode())
                        pos += ln
                    width, nr = struct.unpack_from("<BH", data, pos)
                    pos += 3
                    rank_offs = struct.unpack_from(f"<{nr}I", data, pos)
                    pos += 4 * nr
                    (nw,) = struct.unpack_from("<H", data, pos)
                    pos += 2
                    world_offs = struct.unpack_from(f"<{nw}I", data, pos)
                    pos += 4 * nw
                    entries.append(
                        CommPatchEntry(nid, KernelRef(sh, names[0]), names[1], tuple(rank_offs), tuple(world_offs), width)
                    )
                table.graphs[label] = tuple(entries)
        except (struct.error, UnicodeDecodeError) as exc:
            raise ArchiveCorruptionError(f"patch table is malformed ({exc})") from None
        if pos != len(data):
            raise ArchiveCorruptionError("patch table has trailing bytes")
        return table


class CommStubLayer:
    """Capture-time stand-in for the collective library on a single rank.

    Loads both libraries through the catalog recorder (the real one so it
    lands in the archive, with its device-side init) and emits stub
    launches whose argument buffers it authors.
    """

    def __init__(self, ctx, recorder):
        self.ctx = ctx
        self.recorder = recorder
        stub_payload, real_payload = comm_binaries()
        self.stub_module, _ = recorder.intercept_load(stub_payload)
        self.real_module, _ = recorder.intercept_load(real_payload)
        recorder.intercept_device_init(self.real_module)
        self.stub_hash = recorder.binary_of(self.stub_module)
        self.real_hash = recorder.binary_of(self.real_module)
        recorder.mark(self.stub_hash, FLAG_COMM_STUB)
        recorder.mark(self.real_hash, FLAG_COMM_REAL)
        self.table = PatchTable(self.stub_hash, self.real_hash)
        self._emitted = {}

    def collective(self, kind, send, recv, count, heap, grid=(1, 1, 1), block=(256, 1, 1), stream=0) -> Launch:
        stub_name, real_name = COLLECTIVES[kind]
        kernel = self.ctx.get_function(self.stub_module, stub_name)
        item = Launch(kernel, grid, block, 0, comm_args(kind, send, recv, count, heap), DEFAULT_ATTRS, stream)
        self._emitted[id(item)] = (item, stub_name, real_name)
        return item

    def finish_graph(self, label, work, graph):
        """Record patch entries for the stub launches in ``work``; check coverage."""
        ids = node_ids(work)
        entries = []
        for i, item in enumerate(work):
            hit = self._emitted.pop(id(item), None)
            if hit is not None and hit[0] is item:
                entries.append(CommPatchEntry(ids[i], KernelRef(self.stub_hash, hit[1]), hit[2]))
        check_comm_coverage(graph, entries, {self.stub_hash, self.real_hash})
        if entries:
            self.table.graphs[label] = tuple(entries)
        return entries


def check_comm_coverage(graph, entries, comm_hashes):
    """Every node running a communication-library kernel must be patchable."""
    patched = {e.node_id for e in entries}
    for n in graph.nodes:
        if n.type == NodeType.KERNEL and n.params.kernel.binary_hash in comm_hashes and n.id not in patched:
            raise UnpatchableCommError(
                f"graph {graph.label}: node {n.id} runs {n.params.kernel.name} outside the stub layer; "
                "it cannot be specialized per rank"
            )


def patch_graph(graph, entries, real_hash, rank, world):
    if not entries:
        return graph
    nodes = list(graph.nodes)
    for e in entries:
        node = nodes[e.node_id]
        if node.type != NodeType.KERNEL or node.params.kernel != e.stub:
            raise ArchiveCorruptionError(
                f"graph {graph.label}: patch entry for node {e.node_id} does not match a stub kernel node"
            )
        args = bytearray(node.params.args)
        for off in e.rank_offsets:
            args[off : off + e.width] = rank.to_bytes(e.width, "little")
        for off in e.world_offsets:
            args[off : off + e.width] = world.to_bytes(e.width, "little")
        params = replace(node.params, kernel=KernelRef(real_hash, e.real_name), args=bytes(args))
        nodes[e.node_id] = replace(node, params=params)
    return type(graph)(graph.label, tuple(nodes), graph.edges)


def _check_rank(rank, world):
    if world < 1 or not 0 <= rank < world:
        raise ValueError(f"rank {rank} is outside world of size {world}")


def instantiate_rank(graphs, table: PatchTable, rank: int, world: int):
    """Rank-specialized copies of ``graphs``; unpatched graphs are returned as-is."""
    _check_rank(rank, world)
    return [patch_graph(g, table.entries_for(g.label), table.real_hash, rank, world) for g in graphs]


@dataclass
class UniformityReport:
    ranks: int
    divergences: list = field(default_factory=list)

    @property
    def uniform(self):
        return not self.divergences


def verify_rank_uniformity(instances: dict, table: PatchTable, catalogs: dict = None) -> UniformityReport:
    """Check rank instances differ only inside the rank fields of patched nodes.

    ``instances`` maps rank -> list of graphs; ``catalogs`` optionally maps
    rank -> list of binary hashes.
    """
    ranks = sorted(instances)
    report = UniformityReport(len(ranks))
    if not ranks:
        return report
    ref_rank = ranks[0]
    base = instances[ref_rank]
    for r in ranks[1:]:
        other = instances[r]
        if [g.label for g in other] != [g.label for g in base]:
            report.divergences.append(f"rank {r}: graph set differs from rank {ref_rank}")
            continue
        for ga, gb in zip(base, other):
            d = diff(ga, gb)
            if not d.topology_equal:
                report.divergences.append(f"rank {r} graph {ga.label}: topology differs")
            allowed = {}
            for e in table.entries_for(ga.label):
                allowed[e.node_id] = [(o, o + e.width) for o in e.rank_offsets]
            for delta in d.param_deltas:
                spans = allowed.get(delta.node_id)
                if delta.field == "args" and spans is not None:
                    for s, t in delta.after:
                        if not any(a <= s and t <= b for a, b in spans):
                            report.divergences.append(
                                f"rank {r} graph {ga.label} node {delta.node_id}: argument bytes [{s}, {t}) differ"
                            )
                else:
                    where = f" bytes {delta.after}" if delta.field == "args" else ""
                    report.divergences.append(
                        f"rank {r} graph {ga.label} node {delta.node_id}: {delta.field} differs{where}"
                    )
    if catalogs:
        first = catalogs[ranks[0]]
        for r in ranks[1:]:
            if catalogs.get(r) != first:
                report.divergences.append(f"rank {r}: binary catalog differs from rank {ref_rank}")
    return report

