"""Binary container and JSON documents for captured graphs.

Binary container ("FNDG"), little-endian::

    magic "FNDG" | version u16 | hash algorithm u8 | reserved u8 | graph count u32
    offset table, one entry per graph: label u32 | offset u64 | length u64 | checksum u64
    graph bodies

Each body is ``label u32 | node count u32 | edge count u32``, the node
records, then ``(from u32, to u32)`` edges. The offset table gives O(1)
access to a single graph's parameters; checksums are verified per graph.
"""

from __future__ import annotations

import json
import struct

from foundry.errors import ArchiveCorruptionError, ChecksumError, FormatVersionError, SchemaError
from foundry.graph import (
    CapturedGraph,
    FuncAttrs,
    GraphNode,
    KernelNodeAttrs,
    KernelNodeParams,
    KernelRef,
    MemcpyParams,
    MemsetParams,
    NodeType,
    validate_graph,
)
from foundry.hashing import HASH_ALGORITHM_ID, content_hash

MAGIC = b"FNDG"
VERSION = 1

_HEAD = struct.Struct("<4sHBBI")
_ENTRY = struct.Struct("<IQQQ")
_BODY = struct.Struct("<III")
_KNODE = struct.Struct("<B3IiBBB7IQH")
_KTAIL = struct.Struct("<6iI")
_MEMCPY = struct.Struct("<BQQQ")
_MEMSET = struct.Struct("<BQIQ")
_EMPTY = struct.Struct("<B")
_EDGE = struct.Struct("<II")


def _encode_graph(g: CapturedGraph) -> bytes:
    out = [_BODY.pack(g.label, len(g.nodes), len(g.edges))]
    for n in g.nodes:
        p = n.params
        if n.type == NodeType.KERNEL:
            a = n.attrs
            name = p.kernel.name.encode()
            out.append(
                _KNODE.pack(
                    n.type,
                    *a.cluster_dim,
                    a.cluster_scheduling_policy,
                    a.mem_sync_domain_default,
                    a.mem_sync_domain_remote,
                    int(a.attr_query_available),
                    *p.grid,
                    *p.block,
                    p.shared_mem,
                    p.kernel.binary_hash,
                    len(name),
                )
            )
            out.append(name)
            out.append(_KTAIL.pack(*p.func_attrs.as_tuple(), len(p.args)))
            out.append(p.args)
        elif n.type == NodeType.MEMCPY:
            out.append(_MEMCPY.pack(n.type, p.dst, p.src, p.nbytes))
        elif n.type == NodeType.MEMSET:
            out.append(_MEMSET.pack(n.type, p.dst, p.value, p.nbytes))
        else:
            out.append(_EMPTY.pack(n.type))
    out.extend(_EDGE.pack(*e) for e in g.edges)
    return b"".join(out)


def serialize_binary(graphs) -> bytes:
    bodies = [_encode_graph(g) for g in graphs]
    offset = _HEAD.size + _ENTRY.size * len(bodies)
    table = []
    for g, body in zip(graphs, bodies):
        table.append(_ENTRY.pack(g.label, offset, len(body), content_hash(body)))
        offset += len(body)
    return b"".join([_HEAD.pack(MAGIC, VERSION, HASH_ALGORITHM_ID, 0, len(bodies)), *table, *bodies])


class _Interner:
    """Shares identical refs/attrs across decoded nodes."""

    def __init__(self):
        self.refs = {}
        self.attrs = {}
        self.fattrs = {}


class GraphContainer:
    """Random-access view over a serialized container."""

    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        if len(self.data) < _HEAD.size:
            raise ArchiveCorruptionError("graph container truncated before header")
        magic, version, algo, _, count = _HEAD.unpack_from(self.data, 0)
        if magic != MAGIC:
            raise ArchiveCorruptionError(f"graph container has bad magic {bytes(magic)!r}")
        if version != VERSION:
            raise FormatVersionError(f"graph container version {version} unsupported (expected {VERSION})")
        if algo != HASH_ALGORITHM_ID:
            raise FormatVersionError(f"graph container uses unknown hash algorithm {algo}")
        if len(self.data) < _HEAD.size + count * _ENTRY.size:
            raise ArchiveCorruptionError("graph container truncated in offset table")
        self.entries = [
            _ENTRY.unpack_from(self.data, _HEAD.size + i * _ENTRY.size) for i in range(count)
        ]
        for label, off, length, _ in self.entries:
            if off + length > len(self.data):
                raise ArchiveCorruptionError(f"graph {label}: body runs past end of container (truncated)")
        self.by_label = {e[0]: i for i, e in enumerate(self.entries)}
        self._intern = _Interner()

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return [e[0] for e in self.entries]

    def graph(self, index: int) -> CapturedGraph:
        label, off, length, checksum = self.entries[index]
        body = self.data[off : off + length]
        if content_hash(body) != checksum:
            raise ChecksumError(f"graph {label}: checksum mismatch", label=label)
        try:
            return self._decode(body, label)
        except struct.error as exc:
            raise ArchiveCorruptionError(f"graph {label}: malformed body ({exc})") from None

    def graph_by_label(self, label: int) -> CapturedGraph:
        return self.graph(self.by_label[label])

    def graphs(self):
        return [self.graph(i) for i in range(len(self.entries))]

    def _decode(self, body, label) -> CapturedGraph:
        blabel, n_nodes, n_edges = _BODY.unpack_from(body, 0)
        if blabel != label:
            raise ArchiveCorruptionError(f"graph {label}: body carries label {blabel}")
        pos = _BODY.size
        nodes = []
        append = nodes.append
        refs, attrs, fattrs = self._intern.refs, self._intern.attrs, self._intern.fattrs
        kn_unpack, kn_size = _KNODE.unpack_from, _KNODE.size
        kt_unpack, kt_size = _KTAIL.unpack_from, _KTAIL.size
        kernel_t, memcpy_t, memset_t, empty_t = NodeType.KERNEL, NodeType.MEMCPY, NodeType.MEMSET, NodeType.EMPTY
        for i in range(n_nodes):
            t = body[pos]
            if t == 0:
                v = kn_unpack(body, pos)
                pos += kn_size
                name_end = pos + v[16]
                rkey = (v[15], bytes(body[pos:name_end]))
                ref = refs.get(rkey)
                if ref is None:
                    ref = refs[rkey] = KernelRef(v[15], rkey[1].decode())
                tail = kt_unpack(body, name_end)
                pos = name_end + kt_size
                end = pos + tail[6]
                if end > len(body):
                    raise ArchiveCorruptionError(f"graph {label}: node {i} argument buffer truncated")
                fkey = tail[:6]
                fa = fattrs.get(fkey)
                if fa is None:
                    fa = fattrs[fkey] = FuncAttrs(*fkey)
                akey = v[1:8]
                at = attrs.get(akey)
                if at is None:
                    at = attrs[akey] = KernelNodeAttrs(akey[0:3], akey[3], akey[4], akey[5], bool(akey[6]))
                params = KernelNodeParams(v[8:11], v[11:14], v[14], ref, bytes(body[pos:end]), fa)
                pos = end
                append(GraphNode(i, kernel_t, params, at))
            elif t == 1:
                _, dst, src, nb = _MEMCPY.unpack_from(body, pos)
                pos += _MEMCPY.size
                append(GraphNode(i, memcpy_t, MemcpyParams(dst, src, nb)))
            elif t == 2:
                _, dst, val, nb = _MEMSET.unpack_from(body, pos)
                pos += _MEMSET.size
                append(GraphNode(i, memset_t, MemsetParams(dst, val, nb)))
            elif t == 3:
                pos += 1
                append(GraphNode(i, empty_t))
            else:
                raise ArchiveCorruptionError(f"graph {label}: node {i} has unknown type {t}")
        if pos + n_edges * _EDGE.size != len(body):
            raise ArchiveCorruptionError(f"graph {label}: body length does not match its records")
        edges = tuple(_EDGE.iter_unpack(body[pos:]))
        return CapturedGraph(label, tuple(nodes), edges)


def parse_binary(data: bytes):
    return GraphContainer(data).graphs()


# -- JSON -------------------------------------------------------------------

_TYPE_NAMES = {
    NodeType.KERNEL: "KernelNode",
    NodeType.MEMCPY: "MemcpyNode",
    NodeType.MEMSET: "MemsetNode",
    NodeType.EMPTY: "EmptyNode",
}
_TYPES_BY_NAME = {v: k for k, v in _TYPE_NAMES.items()}

_FATTR_NAMES = (
    "max_dynamic_shared_size_bytes",
    "preferred_shared_memory_carveout",
    "cluster_scheduling_policy_preference",
    "required_cluster_width",
    "required_cluster_height",
    "required_cluster_depth",
)


def node_to_json(n: GraphNode) -> dict:
    p = n.params
    if n.type == NodeType.KERNEL:
        a = n.attrs
        size = len(p.args)
        params = {
            "blockDimX": p.block[0],
            "blockDimY": p.block[1],
            "blockDimZ": p.block[2],
            "gridDimX": p.grid[0],
            "gridDimY": p.grid[1],
            "gridDimZ": p.grid[2],
            "sharedMemBytes": p.shared_mem,
            "kernel_node_attrs": {
                "attrQueryAvailable": a.attr_query_available,
                "clusterDimX": a.cluster_dim[0],
                "clusterDimY": a.cluster_dim[1],
                "clusterDimZ": a.cluster_dim[2],
                "clusterSchedulingPolicyPreference": a.cluster_scheduling_policy,
                "memSyncDomainMapDefault": a.mem_sync_domain_default,
                "memSyncDomainMapRemote": a.mem_sync_domain_remote,
            },
            "kernelParams": [{"index": 0, "offset": 0, "size": size}],
            "extra": [
                "CU_LAUNCH_PARAM_BUFFER_SIZE",
                size,
                "CU_LAUNCH_PARAM_BUFFER_POINTER",
                "null",
                "CU_LAUNCH_PARAM_END",
            ],
            "extra_argBuffer_hex": p.args.hex(),
            "function_name": p.kernel.name,
            "kernel_source_binary_hash": p.kernel.binary_hash,
            "func_attrs": dict(zip(_FATTR_NAMES, p.func_attrs.as_tuple())),
        }
    elif n.type == NodeType.MEMCPY:
        params = {"dst": p.dst, "src": p.src, "ByteCount": p.nbytes}
    elif n.type == NodeType.MEMSET:
        params = {"dst": p.dst, "value": p.value, "ByteCount": p.nbytes}
    else:
        params = {}
    return {"id": n.id, "type": _TYPE_NAMES[n.type], "params": params}


def graph_to_json(g: CapturedGraph) -> dict:
    return {
        "label": g.label,
        "nodes": [node_to_json(n) for n in g.nodes],
        "edges": [list(e) for e in g.edges],
    }


def serialize_json(g: CapturedGraph) -> str:
    return json.dumps(graph_to_json(g), indent=1, sort_keys=False)


def _get(doc, key, path, kind=int):
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected an object")
    if key not in doc:
        raise SchemaError(f"{path}.{key}", "missing field")
    val = doc[key]
    if kind is int and (isinstance(val, bool) or not isinstance(val, int)):
        raise SchemaError(f"{path}.{key}", f"expected integer, got {type(val).__name__}")
    if kind is not int and not isinstance(val, kind):
        raise SchemaError(f"{path}.{key}", f"expected {kind.__name__}, got {type(val).__name__}")
    return val


def node_from_json(doc, path="node") -> GraphNode:
    nid = _get(doc, "id", path)
    tname = _get(doc, "type", path, str)
    if tname not in _TYPES_BY_NAME:
        raise SchemaError(f"{path}.type", f"unknown node type {tname!r}")
    t = _TYPES_BY_NAME[tname]
    p = _get(doc, "params", path, dict)
    pp = f"{path}.params"
    if t == NodeType.KERNEL:
        ap = f"{pp}.kernel_node_attrs"
        a = _get(p, "kernel_node_attrs", pp, dict)
        attrs = KernelNodeAttrs(
            (_get(a, "clusterDimX", ap), _get(a, "clusterDimY", ap), _get(a, "clusterDimZ", ap)),
            _get(a, "clusterSchedulingPolicyPreference", ap),
            _get(a, "memSyncDomainMapDefault", ap),
            _get(a, "memSyncDomainMapRemote", ap),
            _get(a, "attrQueryAvailable", ap, bool),
        )
        hex_args = _get(p, "extra_argBuffer_hex", pp, str)
        try:
            args = bytes.fromhex(hex_args)
        except ValueError:
            raise SchemaError(f"{pp}.extra_argBuffer_hex", "not a hex string") from None
        kp = _get(p, "kernelParams", pp, list)
        if len(kp) != 1:
            raise SchemaError(f"{pp}.kernelParams", "expected exactly one opaque argument buffer")
        size = _get(kp[0], "size", f"{pp}.kernelParams[0]")
        if size != len(args):
            raise SchemaError(f"{pp}.kernelParams[0].size", f"declares {size} bytes, buffer has {len(args)}")
        extra = p.get("extra")
        if extra is not None:
            if not isinstance(extra, list) or "CU_LAUNCH_PARAM_BUFFER_SIZE" not in extra:
                raise SchemaError(f"{pp}.extra", "missing CU_LAUNCH_PARAM_BUFFER_SIZE")
            i = extra.index("CU_LAUNCH_PARAM_BUFFER_SIZE")
            if i + 1 >= len(extra) or extra[i + 1] != size:
                raise SchemaError(f"{pp}.extra", "buffer size marker disagrees with kernelParams")
        fp = f"{pp}.func_attrs"
        fa = _get(p, "func_attrs", pp, dict)
        fattrs = FuncAttrs(*(_get(fa, k, fp) for k in _FATTR_NAMES))
        params = KernelNodeParams(
            (_get(p, "gridDimX", pp), _get(p, "gridDimY", pp), _get(p, "gridDimZ", pp)),
            (_get(p, "blockDimX", pp), _get(p, "blockDimY", pp), _get(p, "blockDimZ", pp)),
            _get(p, "sharedMemBytes", pp),
            KernelRef(_get(p, "kernel_source_binary_hash", pp), _get(p, "function_name", pp, str)),
            args,
            fattrs,
        )
        return GraphNode(nid, t, params, attrs)
    if t == NodeType.MEMCPY:
        return GraphNode(nid, t, MemcpyParams(_get(p, "dst", pp), _get(p, "src", pp), _get(p, "ByteCount", pp)))
    if t == NodeType.MEMSET:
        return GraphNode(nid, t, MemsetParams(_get(p, "dst", pp), _get(p, "value", pp), _get(p, "ByteCount", pp)))
    return GraphNode(nid, t)


def graph_from_json(doc) -> CapturedGraph:
    label = _get(doc, "label", "graph")
    raw_nodes = _get(doc, "nodes", "graph", list)
    raw_edges = _get(doc, "edges", "graph", list)
    nodes = tuple(node_from_json(n, f"graph.nodes[{i}]") for i, n in enumerate(raw_nodes))
    edges = []
    for i, e in enumerate(raw_edges):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(x, int) for x in e)):
            raise SchemaError(f"graph.edges[{i}]", "expected [from, to]")
        edges.append(tuple(e))
    g = CapturedGraph(label, nodes, tuple(sorted(set(edges))))
    try:
        validate_graph(g)
    except ValueError as exc:
        raise SchemaError("graph", str(exc)) from None
    return g


def parse_json(text: str) -> CapturedGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("graph", f"invalid JSON: {exc}") from None
    return graph_from_json(doc)
