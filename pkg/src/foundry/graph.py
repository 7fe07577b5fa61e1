"""Portable graph representation: nodes, edges, parameters and topology keys.

A graph's *topology* is its node types in capture order, the kernel-node
launch attributes and the dependency edges. Everything else (kernel
reference, launch dimensions, shared memory, argument bytes, memop
addresses) is a per-node parameter that an executable can take in place.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Optional, Union


class NodeType(IntEnum):
    KERNEL = 0
    MEMCPY = 1
    MEMSET = 2
    EMPTY = 3


@dataclass(frozen=True, slots=True)
class KernelRef:
    """(binary content hash, mangled name): the portable name of a kernel."""

    binary_hash: int
    name: str

    def __str__(self):
        return f"{self.binary_hash:016x}:{self.name}"


@dataclass(frozen=True, slots=True)
class FuncAttrs:
    max_dynamic_shared_size_bytes: int = 0
    preferred_shared_memory_carveout: int = -1
    cluster_scheduling_policy_preference: int = 0
    required_cluster_width: int = 0
    required_cluster_height: int = 0
    required_cluster_depth: int = 0

    def as_tuple(self):
        return (
            self.max_dynamic_shared_size_bytes,
            self.preferred_shared_memory_carveout,
            self.cluster_scheduling_policy_preference,
            self.required_cluster_width,
            self.required_cluster_height,
            self.required_cluster_depth,
        )


@dataclass(frozen=True, slots=True)
class KernelNodeAttrs:
    """Launch attributes set on a kernel node. Part of the topology."""

    cluster_dim: tuple = (1, 1, 1)
    cluster_scheduling_policy: int = 0
    mem_sync_domain_default: int = 0
    mem_sync_domain_remote: int = 1
    attr_query_available: bool = True

    def set_calls(self) -> int:
        """Number of set-attribute driver calls explicit construction needs."""
        n = 0
        if self.cluster_dim != (1, 1, 1):
            n += 1
        if self.cluster_scheduling_policy != 0:
            n += 1
        if (self.mem_sync_domain_default, self.mem_sync_domain_remote) != (0, 1):
            n += 1
        return n

    def pack(self) -> bytes:
        return _ATTRS.pack(
            *self.cluster_dim,
            self.cluster_scheduling_policy,
            self.mem_sync_domain_default,
            self.mem_sync_domain_remote,
            int(self.attr_query_available),
        )


_ATTRS = struct.Struct("<IIIiBBB")
DEFAULT_ATTRS = KernelNodeAttrs()


@dataclass(frozen=True, slots=True)
class KernelNodeParams:
    grid: tuple
    block: tuple
    shared_mem: int
    kernel: KernelRef
    args: bytes
    func_attrs: FuncAttrs = FuncAttrs()


@dataclass(frozen=True, slots=True)
class MemcpyParams:
    dst: int
    src: int
    nbytes: int


@dataclass(frozen=True, slots=True)
class MemsetParams:
    dst: int
    value: int
    nbytes: int


NodeParams = Union[KernelNodeParams, MemcpyParams, MemsetParams, None]

_PARAM_TYPES = {
    NodeType.KERNEL: KernelNodeParams,
    NodeType.MEMCPY: MemcpyParams,
    NodeType.MEMSET: MemsetParams,
    NodeType.EMPTY: type(None),
}


@dataclass(frozen=True, slots=True)
class GraphNode:
    id: int
    type: NodeType
    params: NodeParams = None
    attrs: Optional[KernelNodeAttrs] = None


@dataclass(frozen=True)
class CapturedGraph:
    """One captured graph. ``label`` is the batch size it was captured for."""

    label: int
    nodes: tuple
    edges: tuple = ()

    @cached_property
    def key(self) -> bytes:
        return topology_key(self)

    def kernel_refs(self):
        return {n.params.kernel for n in self.nodes if n.type == NodeType.KERNEL}


def make_graph(label, nodes, edges) -> CapturedGraph:
    """Build a graph with canonical (sorted, deduplicated) edges."""
    return CapturedGraph(label, tuple(nodes), tuple(sorted(set(edges))))


def validate_graph(graph: CapturedGraph) -> None:
    n = len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        if node.id != i:
            raise ValueError(f"graph {graph.label}: node ids must be 0..N-1, got {node.id} at {i}")
        if not isinstance(node.params, _PARAM_TYPES[node.type]):
            raise ValueError(f"graph {graph.label}: node {i} params do not match type {node.type.name}")
        if node.type == NodeType.KERNEL:
            p = node.params
            if not p.args:
                raise ValueError(f"graph {graph.label}: kernel node {i} has empty argument buffer")
            if min(p.grid) < 1 or min(p.block) < 1:
                raise ValueError(f"graph {graph.label}: kernel node {i} has a zero launch dimension")
            if node.attrs is None:
                raise ValueError(f"graph {graph.label}: kernel node {i} lacks attributes")
        elif node.attrs is not None:
            raise ValueError(f"graph {graph.label}: only kernel nodes carry attributes (node {i})")
    indeg = [0] * n
    succ = [[] for _ in range(n)]
    for a, b in graph.edges:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise ValueError(f"graph {graph.label}: invalid edge ({a}, {b})")
        succ[a].append(b)
        indeg[b] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while ready:
        i = ready.pop()
        seen += 1
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(j)
    if seen != n:
        raise ValueError(f"graph {graph.label}: edges contain a cycle")


_U32 = struct.Struct("<I")
_EDGE = struct.Struct("<II")


def topology_key(graph: CapturedGraph) -> bytes:
    """128-bit digest of node count, per-node (type, attrs) and sorted edges."""
    h = hashlib.blake2b(digest_size=16, person=b"foundry-topo")
    h.update(_U32.pack(len(graph.nodes)))
    for node in graph.nodes:
        h.update(bytes((node.type,)))
        if node.type == NodeType.KERNEL:
            h.update(node.attrs.pack())
    edges = sorted(graph.edges)
    h.update(_U32.pack(len(edges)))
    for e in edges:
        h.update(_EDGE.pack(*e))
    return h.digest()


@dataclass(frozen=True)
class ParamSet:
    """Per-node parameters of one graph, ready to apply to an executable."""

    label: int
    key: bytes
    params: tuple

    def __len__(self):
        return len(self.params)


def param_set(graph: CapturedGraph) -> ParamSet:
    return ParamSet(graph.label, graph.key, tuple(n.params for n in graph.nodes))


def construction_calls(graph: CapturedGraph) -> int:
    """Graph-mutation calls explicit construction issues for this graph."""
    attrs = sum(n.attrs.set_calls() for n in graph.nodes if n.attrs is not None)
    return len(graph.nodes) + len(graph.edges) + attrs


# -- diff ---------------------------------------------------------------------


@dataclass(frozen=True)
class NodeDelta:
    node_id: int
    field: str
    before: object
    after: object


@dataclass
class GraphDiff:
    topology_equal: bool
    topology_deltas: list = field(default_factory=list)
    param_deltas: list = field(default_factory=list)

    @property
    def empty(self):
        return self.topology_equal and not self.param_deltas

    def changed_nodes(self):
        return sorted({d.node_id for d in self.param_deltas})

    def lines(self):
        out = []
        for d in self.topology_deltas:
            out.append(f"topology: {d}")
        for d in self.param_deltas:
            out.append(f"node {d.node_id}: {d.field}: {d.before} -> {d.after}")
        return out


def byte_ranges(a: bytes, b: bytes):
    """Half-open [start, end) ranges where two buffers differ."""
    ranges = []
    n = max(len(a), len(b))
    i = 0
    while i < n:
        if i < len(a) and i < len(b) and a[i] == b[i]:
            i += 1
            continue
        j = i
        while j < n and not (j < len(a) and j < len(b) and a[j] == b[j]):
            j += 1
        ranges.append((i, j))
        i = j
    return ranges


def _param_deltas(node_id, pa, pb):
    out = []
    if pa == pb:
        return out
    if isinstance(pa, KernelNodeParams):
        if pa.kernel != pb.kernel:
            out.append(NodeDelta(node_id, "kernel", str(pa.kernel), str(pb.kernel)))
        for name in ("grid", "block", "shared_mem", "func_attrs"):
            va, vb = getattr(pa, name), getattr(pb, name)
            if va != vb:
                out.append(NodeDelta(node_id, name, va, vb))
        if pa.args != pb.args:
            out.append(NodeDelta(node_id, "args", len(pa.args), byte_ranges(pa.args, pb.args)))
    else:
        for name in ("dst", "src", "value", "nbytes"):
            if hasattr(pa, name) and getattr(pa, name) != getattr(pb, name):
                out.append(NodeDelta(node_id, name, getattr(pa, name), getattr(pb, name)))
    return out


def diff(a: CapturedGraph, b: CapturedGraph) -> GraphDiff:
    """Topology equality first, then parameter deltas for aligned nodes."""
    result = GraphDiff(topology_equal=a.key == b.key)
    if not result.topology_equal:
        if len(a.nodes) != len(b.nodes):
            result.topology_deltas.append(f"node count {len(a.nodes)} != {len(b.nodes)}")
        for na, nb in zip(a.nodes, b.nodes):
            if na.type != nb.type:
                result.topology_deltas.append(f"node {na.id} type {na.type.name} != {nb.type.name}")
            elif na.attrs != nb.attrs:
                result.topology_deltas.append(f"node {na.id} attrs {na.attrs} != {nb.attrs}")
        ea, eb = set(a.edges), set(b.edges)
        if ea != eb:
            result.topology_deltas.append(
                f"edges only in a: {sorted(ea - eb)}; only in b: {sorted(eb - ea)}"
            )
    for na, nb in zip(a.nodes, b.nodes):
        if na.type == nb.type:
            result.param_deltas.extend(_param_deltas(na.id, na.params, nb.params))
    return result
