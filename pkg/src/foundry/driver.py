"""Simulated device driver.

Provides contexts, virtual-memory mapping, module loading, stream capture,
explicit graph construction, instantiation, in-place executable update and
replay. Replay validates what real hardware would trip over: every kernel
must resolve to a loaded module, modules that need device-side init must
have had it, and every address the kernel dereferences must be mapped.
"""

from __future__ import annotations

import bisect
import itertools
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Optional, Union

from foundry import binfmt
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
    CapturedGraph,
    GraphNode,
    KernelNodeAttrs,
    KernelNodeParams,
    KernelRef,
    MemcpyParams,
    MemsetParams,
    NodeType,
    ParamSet,
    make_graph,
    param_set,
    validate_graph,
)
from foundry.hashing import content_hash

COUNTER_NAMES = (
    "alloc",
    "module",
    "device_init",
    "link",
    "prelink",
    "capture",
    "graph_mutation",
    "instantiate",
    "update",
    "update_nodes",
    "launch",
    "contention",
)

_U64 = struct.Struct("<Q")


class LoadVariant(IntEnum):
    DATA = 0
    FILE = 1
    WITH_OPTIONS = 2


class Counters:
    """Monotonic per-context driver-call counters."""

    def __init__(self):
        self._c = Counter({name: 0 for name in COUNTER_NAMES})
        self._lock = threading.Lock()

    def bump(self, name, n=1):
        with self._lock:
            self._c[name] += n

    def __getitem__(self, name):
        return self._c[name]

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._c)


def counter_delta(before: dict, after: dict) -> dict:
    return {k: after.get(k, 0) - before.get(k, 0) for k in after}


class DriverLane:
    """The single lane graph-mutation, instantiate and update calls share.

    Callers block, never error. ``penalty_per_waiter`` adds simulated cost
    units to the caller's ``contention`` counter for every thread already
    queued when the call arrives; it is reporting only.
    """

    def __init__(self, penalty_per_waiter=0):
        self._lock = threading.Lock()
        self._meta = threading.Lock()
        self.penalty_per_waiter = penalty_per_waiter
        self.waiting = 0
        self.holders = 0
        self.max_holders = 0

    def acquire(self, counters: Counters):
        with self._meta:
            waiters = self.waiting
            self.waiting += 1
        if waiters and self.penalty_per_waiter:
            counters.bump("contention", waiters * self.penalty_per_waiter)
        self._lock.acquire()
        with self._meta:
            self.waiting -= 1
            self.holders += 1
            self.max_holders = max(self.max_holders, self.holders)

    def release(self):
        with self._meta:
            self.holders -= 1
        self._lock.release()


GLOBAL_LANE = DriverLane()


class IntervalSet:
    """Disjoint half-open [start, end) address ranges."""

    def __init__(self):
        self._starts = []
        self._ends = []

    def __len__(self):
        return len(self._starts)

    def ranges(self):
        return list(zip(self._starts, self._ends))

    def add(self, start, end):
        i = bisect.bisect_right(self._starts, start)
        if i > 0 and self._ends[i - 1] > start:
            raise DriverError(f"range {start:#x}+{end - start:#x} overlaps an existing mapping")
        if i < len(self._starts) and self._starts[i] < end:
            raise DriverError(f"range {start:#x}+{end - start:#x} overlaps an existing mapping")
        self._starts.insert(i, start)
        self._ends.insert(i, end)

    def remove(self, start, end):
        """Carve [start, end) out of one containing range."""
        i = bisect.bisect_right(self._starts, start) - 1
        if i < 0 or self._ends[i] < end:
            raise DriverError(f"range {start:#x}+{end - start:#x} is not mapped")
        s, e = self._starts[i], self._ends[i]
        del self._starts[i], self._ends[i]
        if e > end:
            self._starts.insert(i, end)
            self._ends.insert(i, e)
        if s < start:
            self._starts.insert(i, s)
            self._ends.insert(i, start)

    def covers(self, start, n=1) -> bool:
        i = bisect.bisect_right(self._starts, start) - 1
        return i >= 0 and start + n <= self._ends[i]


@dataclass(frozen=True)
class SimKernel:
    handle: int
    module: int
    name: str
    binary_hash: int
    arg_size: int
    hidden_offsets: tuple
    func_attrs: object

    @property
    def ref(self):
        return KernelRef(self.binary_hash, self.name)


@dataclass
class _Module:
    handle: int
    binary_hash: int
    binary: binfmt.SimBinary
    variant: LoadVariant
    options: bytes
    functions: dict
    inited: bool = False


# -- capture work items -----------------------------------------------------


@dataclass(frozen=True)
class Launch:
    kernel: int
    grid: tuple
    block: tuple
    shared_mem: int
    args: bytes
    attrs: KernelNodeAttrs = DEFAULT_ATTRS
    stream: int = 0


@dataclass(frozen=True)
class Memcpy:
    dst: int
    src: int
    nbytes: int
    stream: int = 0


@dataclass(frozen=True)
class Memset:
    dst: int
    value: int
    nbytes: int
    stream: int = 0


@dataclass(frozen=True)
class EmptyOp:
    stream: int = 0


@dataclass(frozen=True)
class RecordEvent:
    event: int
    stream: int = 0


@dataclass(frozen=True)
class WaitEvent:
    event: int
    stream: int = 0


NODE_OPS = (Launch, Memcpy, Memset, EmptyOp)


def node_ids(work):
    """Map work-sequence index -> node id for items that become nodes."""
    out, n = {}, 0
    for i, item in enumerate(work):
        if isinstance(item, NODE_OPS):
            out[i] = n
            n += 1
    return out


# -- executables and traces ---------------------------------------------------


@dataclass
class _Graph:
    handle: int
    desc: CapturedGraph
    kernels: tuple


@dataclass
class GraphExec:
    id: int
    key: bytes
    epoch: int
    types: tuple
    params: list
    kernels: list
    label: int

    @property
    def node_count(self):
        return len(self.types)

    def snapshot(self) -> ParamSet:
        return ParamSet(self.label, self.key, tuple(self.params))


@dataclass(frozen=True)
class TraceRecord:
    node_id: int
    kind: str
    kernel: str
    grid: tuple
    block: tuple
    shared_mem: int
    arg_digest: int
    addresses: tuple

    def pack(self) -> bytes:
        name = self.kernel.encode()
        head = struct.pack(
            "<IB H7IQH",
            self.node_id,
            NodeType[self.kind.upper()],
            len(name),
            *self.grid,
            *self.block,
            self.shared_mem,
            self.arg_digest,
            len(self.addresses),
        )
        return head + name + b"".join(_U64.pack(a) for a in self.addresses)


@dataclass(frozen=True)
class LaunchTrace:
    label: int
    records: tuple

    def to_bytes(self) -> bytes:
        return struct.pack("<II", self.label, len(self.records)) + b"".join(
            r.pack() for r in self.records
        )


# -- context ------------------------------------------------------------------

_ctx_ids = itertools.count(1)


class DeviceContext:
    """One simulated device context."""

    def __init__(self, lane: Optional[DriverLane] = None):
        self.id = next(_ctx_ids)
        self.lane = lane or GLOBAL_LANE
        self.counters = Counters()
        self.mapped = IntervalSet()
        self.reserved = IntervalSet()
        self.modules = {}
        self.kernels = {}
        self.mutation_threads = set()
        self._by_ref = {}
        self._graphs = {}
        self._handles = itertools.count(1)
        self._ctx_lock = threading.RLock()
        self._capturing = False

    # -- virtual memory -------------------------------------------------

    def reserve_va(self, base, size):
        with self._ctx_lock:
            self.counters.bump("alloc")
            self.reserved.add(base, base + size)

    def map_range(self, addr, length):
        with self._ctx_lock:
            if not self.reserved.covers(addr, length):
                raise DriverError(f"map of {addr:#x}+{length:#x} outside any reservation")
            self.counters.bump("alloc")
            self.mapped.add(addr, addr + length)

    def unmap_range(self, addr, length):
        with self._ctx_lock:
            self.counters.bump("alloc")
            self.mapped.remove(addr, addr + length)

    def is_mapped(self, addr, n=1) -> bool:
        return self.mapped.covers(addr, n)

    # -- modules ----------------------------------------------------------

    def load_module(
        self,
        payload: Union[bytes, str, Path],
        variant: LoadVariant = LoadVariant.DATA,
        options: bytes = b"",
    ) -> int:
        variant = LoadVariant(variant)
        if variant == LoadVariant.FILE:
            payload = Path(payload).read_bytes()
        payload = bytes(payload)
        binary = binfmt.decode(payload)
        h = content_hash(payload)
        with self._ctx_lock:
            self.counters.bump("module")
            mod = _Module(next(self._handles), h, binary, variant, bytes(options), {})
            for e in binary.entries:
                k = SimKernel(
                    next(self._handles), mod.handle, e.name, h, e.arg_size, e.hidden_offsets, e.func_attrs
                )
                mod.functions[e.name] = k.handle
                self.kernels[k.handle] = k
                self._by_ref.setdefault((h, e.name), k.handle)
            self.modules[mod.handle] = mod
            return mod.handle

    def unload_module(self, module):
        with self._ctx_lock:
            mod = self._module(module)
            self.counters.bump("module")
            for name, kh in mod.functions.items():
                del self.kernels[kh]
                if self._by_ref.get((mod.binary_hash, name)) == kh:
                    del self._by_ref[(mod.binary_hash, name)]
                    for other in self.modules.values():
                        if other is not mod and other.binary_hash == mod.binary_hash:
                            self._by_ref[(mod.binary_hash, name)] = other.functions[name]
                            break
            del self.modules[module]

    def _module(self, module) -> _Module:
        try:
            return self.modules[module]
        except KeyError:
            raise DriverError(f"invalid module handle {module}") from None

    def module_hash(self, module) -> int:
        return self._module(module).binary_hash

    def module_needs_init(self, module) -> bool:
        return self._module(module).binary.needs_device_init

    def get_function(self, module, name) -> int:
        mod = self._module(module)
        try:
            return mod.functions[name]
        except KeyError:
            raise UnresolvedKernelError(
                f"kernel {name} not in module {module}", ref=KernelRef(mod.binary_hash, name)
            ) from None

    def find_function(self, name) -> int:
        """Search every loaded module for ``name`` (the slow, lazy path)."""
        for mod in self.modules.values():
            if name in mod.functions:
                return mod.functions[name]
        raise UnresolvedKernelError(f"kernel {name} is not loaded in context {self.id}")

    def resolve(self, ref: KernelRef) -> int:
        try:
            return self._by_ref[(ref.binary_hash, ref.name)]
        except KeyError:
            raise UnresolvedKernelError(f"unresolved kernel {ref}", ref=ref) from None

    def kernel(self, handle) -> SimKernel:
        try:
            return self.kernels[handle]
        except KeyError:
            raise UnresolvedKernelError(f"kernel handle {handle} is not loaded") from None

    def device_init(self, module):
        """Initialize device-side runtime state of a loaded module."""
        with self._ctx_lock:
            mod = self._module(module)
            if not mod.binary.needs_device_init:
                raise DriverError(f"module {module} has no device-side state to initialize")
            self.counters.bump("device_init")
            mod.inited = True

    def link(self, segments) -> bytes:
        self.counters.bump("link")
        return binfmt.link(segments)

    # -- graph construction -------------------------------------------------

    def _mutation(self, n=1):
        self.lane.acquire(self.counters)
        try:
            self.mutation_threads.add(threading.get_ident())
            self.counters.bump("graph_mutation", n)
        finally:
            self.lane.release()

    def stream_capture(self, work, label=0) -> CapturedGraph:
        """Record ``work`` into a graph without executing it."""
        with self._ctx_lock:
            if self._capturing:
                raise CaptureError(f"context {self.id} is already capturing")
            self._capturing = True
        try:
            return self._capture(work, label)
        finally:
            self._capturing = False

    def _capture(self, work, label):
        self.counters.bump("capture")
        nodes, edges = [], []
        frontier = {0: ()}
        events = {}
        joined = set()
        for item in work:
            stream = item.stream
            if isinstance(item, WaitEvent):
                if item.event not in events:
                    raise CaptureError(f"wait on unrecorded event {item.event}")
                frontier[stream] = tuple(sorted(set(frontier.get(stream, ())) | set(events[item.event])))
                if stream == 0:
                    joined.update(events[item.event])
                continue
            if stream not in frontier:
                raise CaptureError(f"stream {stream} used before joining the capture")
            if isinstance(item, RecordEvent):
                events[item.event] = frontier[stream]
                continue
            nid = len(nodes)
            if isinstance(item, Launch):
                try:
                    k = self.kernel(item.kernel)
                except UnresolvedKernelError as exc:
                    raise UnresolvedKernelError(
                        f"capture aborted: {exc}", node_id=nid
                    ) from None
                params = KernelNodeParams(
                    tuple(item.grid), tuple(item.block), item.shared_mem, k.ref, bytes(item.args), k.func_attrs
                )
                node = GraphNode(nid, NodeType.KERNEL, params, item.attrs)
            elif isinstance(item, Memcpy):
                node = GraphNode(nid, NodeType.MEMCPY, MemcpyParams(item.dst, item.src, item.nbytes))
            elif isinstance(item, Memset):
                node = GraphNode(nid, NodeType.MEMSET, MemsetParams(item.dst, item.value, item.nbytes))
            elif isinstance(item, EmptyOp):
                node = GraphNode(nid, NodeType.EMPTY)
            else:
                raise CaptureError(f"unsupported work item {item!r}")
            nodes.append(node)
            edges.extend((d, nid) for d in frontier[stream])
            frontier[stream] = (nid,)
        for stream, tail in frontier.items():
            if stream != 0 and not set(tail) <= joined:
                raise CaptureError(f"stream {stream} has work that never rejoined the origin stream")
        return make_graph(label, nodes, edges)

    def _resolve_with(self, resolver, ref, node_id):
        if resolver is not None:
            try:
                return resolver[ref]
            except KeyError:
                raise UnresolvedKernelError(
                    f"node {node_id}: unresolved kernel {ref}", node_id=node_id, ref=ref
                ) from None
        try:
            return self.resolve(ref)
        except UnresolvedKernelError:
            raise UnresolvedKernelError(
                f"node {node_id}: unresolved kernel {ref}", node_id=node_id, ref=ref
            ) from None

    def build_graph(self, desc: CapturedGraph, resolver=None) -> int:
        """Explicitly construct ``desc``; one mutation per node, edge and attribute set."""
        validate_graph(desc)
        kernels = []
        for node in desc.nodes:
            kh = None
            if node.type == NodeType.KERNEL:
                kh = self._resolve_with(resolver, node.params.kernel, node.id)
                self.kernel(kh)
            self._mutation()
            if node.attrs is not None:
                for _ in range(node.attrs.set_calls()):
                    self._mutation()
            kernels.append(kh)
        for _ in desc.edges:
            self._mutation()
        with self._ctx_lock:
            g = _Graph(next(self._handles), desc, tuple(kernels))
            self._graphs[g.handle] = g
        return g.handle

    def export_graph(self, handle) -> CapturedGraph:
        return self._graph(handle).desc

    def _graph(self, handle) -> _Graph:
        try:
            return self._graphs[handle]
        except KeyError:
            raise DriverError(f"invalid graph handle {handle}") from None

    def destroy_graph(self, handle):
        with self._ctx_lock:
            self._graph(handle)
            del self._graphs[handle]

    def instantiate(self, handle) -> GraphExec:
        g = self._graph(handle)
        self.lane.acquire(self.counters)
        try:
            self.mutation_threads.add(threading.get_ident())
            self.counters.bump("instantiate")
            with self._ctx_lock:
                eid = next(self._handles)
        finally:
            self.lane.release()
        d = g.desc
        return GraphExec(
            eid,
            d.key,
            0,
            tuple(n.type for n in d.nodes),
            [n.params for n in d.nodes],
            list(g.kernels),
            d.label,
        )

    def exec_update(self, exe: GraphExec, donor: Union[ParamSet, CapturedGraph], resolver=None) -> GraphExec:
        """Apply a same-topology donor's parameters to ``exe`` in place."""
        if isinstance(donor, CapturedGraph):
            donor = param_set(donor)
        if donor.key != exe.key or len(donor.params) != exe.node_count:
            raise TopologyMismatchError(
                f"update of exec {exe.id} rejected: donor graph {donor.label} has a different topology"
            )
        changes = []
        for i, (old, new) in enumerate(zip(exe.params, donor.params)):
            if old == new:
                continue
            kh = None
            if exe.types[i] == NodeType.KERNEL:
                kh = self._resolve_with(resolver, new.kernel, i)
                self.kernel(kh)
            changes.append((i, new, kh))
        self.lane.acquire(self.counters)
        try:
            self.mutation_threads.add(threading.get_ident())
            self.counters.bump("update")
            self.counters.bump("update_nodes", len(changes))
            for i, new, kh in changes:
                exe.params[i] = new
                exe.kernels[i] = kh
            exe.epoch += 1
            exe.label = donor.label
        finally:
            self.lane.release()
        return exe

    # -- replay ------------------------------------------------------------------

    def replay(self, exe: GraphExec) -> LaunchTrace:
        """Launch ``exe`` and validate every embedded reference."""
        self.counters.bump("launch")
        records = []
        for i, (t, p, kh) in enumerate(zip(exe.types, exe.params, exe.kernels)):
            if t == NodeType.KERNEL:
                k = self.kernels.get(kh)
                if k is None or k.ref != p.kernel:
                    raise UnresolvedKernelError(
                        f"node {i}: kernel {p.kernel} is not loaded", node_id=i, ref=p.kernel
                    )
                mod = self.modules[k.module]
                if mod.binary.needs_device_init and not mod.inited:
                    raise DeviceStateUninitializedError(
                        f"node {i}: module of {k.name} has uninitialized device-side state"
                    )
                args = p.args
                addrs = []
                for off in k.hidden_offsets:
                    if off + 8 > len(args):
                        raise UnmappedAddressError(
                            f"node {i}: argument buffer too short for offset {off}", i, off, None
                        )
                    (addr,) = _U64.unpack_from(args, off)
                    if not self.mapped.covers(addr):
                        raise UnmappedAddressError(
                            f"node {i}: address {addr:#x} at argument offset {off} is not mapped",
                            i,
                            off,
                            addr,
                        )
                    addrs.append(addr)
                records.append(
                    TraceRecord(i, "kernel", k.name, p.grid, p.block, p.shared_mem, content_hash(args), tuple(addrs))
                )
            elif t == NodeType.MEMCPY:
                self._check_range(i, p.dst, p.nbytes)
                self._check_range(i, p.src, p.nbytes)
                records.append(TraceRecord(i, "memcpy", "", (1, 1, 1), (1, 1, 1), 0, p.nbytes, (p.dst, p.src)))
            elif t == NodeType.MEMSET:
                self._check_range(i, p.dst, p.nbytes)
                records.append(TraceRecord(i, "memset", "", (1, 1, 1), (1, 1, 1), 0, p.value, (p.dst,)))
            else:
                records.append(TraceRecord(i, "empty", "", (1, 1, 1), (1, 1, 1), 0, 0, ()))
        return LaunchTrace(exe.label, tuple(records))

    def _check_range(self, node_id, addr, n):
        if not self.mapped.covers(addr, max(n, 1)):
            raise UnmappedAddressError(
                f"node {node_id}: memory range {addr:#x}+{n:#x} is not mapped", node_id, None, addr
            )

    def counter_report(self) -> dict:
        return self.counters.snapshot()


def replay(exe: GraphExec, ctx: DeviceContext) -> LaunchTrace:
    return ctx.replay(exe)
