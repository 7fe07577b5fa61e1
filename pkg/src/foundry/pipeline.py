"""SAVE and LOAD orchestration and the on-disk archive.

An archive is a directory::

    manifest.json   format version, workload spec, allocator state, grouping,
                    world-size placeholder, file digests
    graphs.bin      every captured graph (binary container)
    memlayout.bin   the capture-window allocation log
    catalog.bin     binary index and (hash, name) -> entrypoint table
    patch.bin       per-rank patch table (empty for non-communicating workloads)
    binaries/       one file per kernel binary, named by content hash
    graphs/         optional JSON mirror of every graph

or the same files packed into one uncompressed file (magic "FNDA", then a
name/offset/length index).
"""

from __future__ import annotations

import contextlib
import json
import logging
import os
import shutil
import struct
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from foundry import graphio
from foundry.alloc import MemoryEventLog, Phase, RegionConfig, reserve
from foundry.catalog import Catalog, CatalogRecorder, KernelResolver
from foundry.driver import DeviceContext, Launch, counter_delta
from foundry.errors import (
    ArchiveCorruptionError,
    ArchiveError,
    FormatVersionError,
    FoundryError,
)
from foundry.graph import diff as graph_diff
from foundry.hashing import HASH_ALGORITHM_ID, HASH_ALGORITHM_NAME, digest128, hex_hash
from foundry.rankforge import COLLECTIVES, CommStubLayer, PatchTable, comm_args, patch_graph
from foundry.templater import GroupingManifest, Templater, group
from foundry.workload import Workload, WorkloadSpec, generate

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
GRAPHS = "graphs.bin"
MEMLAYOUT = "memlayout.bin"
CATALOG = "catalog.bin"
PATCH = "patch.bin"
BINARIES = "binaries"

PACK_MAGIC = b"FNDA"
_PACK_HEAD = struct.Struct("<4sHHI")
_PACK_ENTRY = struct.Struct("<QQ")


@contextlib.contextmanager
def phase(name):
    """Tag any library error escaping the block with the pipeline step."""
    log.info("%s", name)
    try:
        yield
    except FoundryError as exc:
        if exc.phase is None:
            exc.phase = name
        raise


def run_init_allocations(region, plan):
    """The workload's deterministic pre-capture allocation sequence."""
    buffers = {}
    for step in plan:
        addr = region.allocate(step.size)
        if step.free:
            region.free(addr)
        else:
            buffers[step.name] = (addr, step.size)
    return buffers


# -- SAVE -----------------------------------------------------------------------


class _CaptureEnv:
    """What the workload sees while capturing on the single SAVE rank."""

    def __init__(self, ctx, modules, buffers, comm):
        self.ctx = ctx
        self.modules = modules
        self.buffers = buffers
        self.scratch = {}
        self.comm = comm

    def kernel(self, binary_key, name):
        return self.ctx.get_function(self.modules[binary_key], name)

    def addr(self, name, b):
        if name == "scratch":
            return self.scratch[b]
        return self.buffers[name]

    def raw_comm(self, kind, send, recv, count, heap):
        # A collective issued straight through the real library, bypassing the stub layer.
        kernel = self.ctx.get_function(self.comm.real_module, COLLECTIVES[kind][1])
        return Launch(kernel, (1, 1, 1), (256, 1, 1), 0, comm_args(kind, send, recv, count, heap))


@dataclass
class SaveResult:
    spec: WorkloadSpec
    workload: Workload
    ctx: DeviceContext
    graphs: list
    grouping: GroupingManifest
    catalog: Catalog
    payloads: dict
    patch_table: PatchTable
    window_log: MemoryEventLog
    config: RegionConfig
    final_offset: int
    buffers: dict
    alloc_records: list = field(default_factory=list)
    path: Optional[Path] = None
    counters: dict = field(default_factory=dict)

    def graph(self, label):
        return self.graphs[label - 1]


def capture(spec: WorkloadSpec, config: Optional[RegionConfig] = None) -> SaveResult:
    """Run warmup and capture on a fresh context; nothing is written."""
    with phase("generate"):
        wl = generate(spec)
    ctx = DeviceContext()
    recorder = CatalogRecorder(ctx)
    modules = {}
    with phase("load-binaries"):
        for bs in wl.binaries:
            if bs.prelinked:
                modules[bs.key], _ = recorder.prelink_and_load(bs.segments, bs.variant, bs.options)
            else:
                modules[bs.key], _ = recorder.intercept_load(bs.payload, bs.variant, bs.options)
        comm = CommStubLayer(ctx, recorder) if spec.comm_mode == "spmd" else None
    config = config or RegionConfig.from_env()
    with phase("init-allocations"):
        region = reserve(ctx, config, Phase.SAVE)
        buffers = run_init_allocations(region, wl.alloc_plan)
    env = _CaptureEnv(ctx, modules, buffers, comm)
    graphs = {}
    with phase("capture"):
        region.record_capture_window()
        for b in wl.capture_order():
            size = wl.scratch_size(b)
            env.scratch[b] = (region.allocate(size), size)
            work = wl.work(b, env)
            g = ctx.stream_capture(work, label=b)
            if comm is not None:
                comm.finish_graph(b, work, g)
            graphs[b] = g
        log = region.end_capture_window()
    ordered = [graphs[b] for b in sorted(graphs)]
    table = comm.table if comm is not None else PatchTable()
    with phase("catalog"):
        refs = set()
        for g in ordered:
            refs.update(g.kernel_refs())
        refs.update(table.kernel_refs())
        catalog = recorder.catalog.pruned(refs)
        payloads = {b.hash: b.payload for b in catalog.binaries}
    return SaveResult(
        spec,
        wl,
        ctx,
        ordered,
        group(ordered),
        catalog,
        payloads,
        table,
        log,
        config,
        region.offset,
        buffers,
        list(region.records),
        counters=ctx.counter_report(),
    )


def _file_entry(data: bytes):
    return {"size": len(data), "digest": digest128(data).hex()}


def archive_files(saved: SaveResult, json_graphs=False) -> dict:
    """Every archive file as name -> bytes, manifest included."""
    files = {
        GRAPHS: graphio.serialize_binary(saved.graphs),
        MEMLAYOUT: saved.window_log.to_bytes(),
        CATALOG: saved.catalog.to_bytes(),
        PATCH: saved.patch_table.to_bytes(),
    }
    for b in saved.catalog.binaries:
        files[f"{BINARIES}/{b.filename}"] = saved.payloads[b.hash]
    if json_graphs:
        for g in saved.graphs:
            files[f"graphs/{g.label}.json"] = graphio.serialize_json(g).encode()
    cfg = saved.config
    manifest = {
        "format_version": FORMAT_VERSION,
        "hash_algorithm": {"id": HASH_ALGORITHM_ID, "name": HASH_ALGORITHM_NAME},
        "workload": {"spec": saved.spec.to_dict(), "digest": saved.spec.digest()},
        "allocator": {
            "base": cfg.base,
            "capacity": cfg.capacity,
            "granularity": cfg.granularity,
            "window_start_offset": saved.window_log.start_offset,
            "final_offset": saved.final_offset,
        },
        "memlayout": MEMLAYOUT,
        "graphs": GRAPHS,
        "catalog": CATALOG,
        "patch_table": PATCH,
        "grouping": saved.grouping.to_dict(),
        "comm": {
            "world_placeholder": saved.patch_table.world_placeholder,
            "rank_uniform": saved.spec.rank_uniform,
            "patched_nodes": saved.patch_table.total_entries(),
        },
        "kv_cache_bytes": saved.spec.kv_cache_bytes,
        "files": {name: _file_entry(data) for name, data in sorted(files.items())},
    }
    files[MANIFEST] = (json.dumps(manifest, sort_keys=True, indent=1) + "\n").encode()
    return files


def _write_tree(root: Path, files: dict):
    for name, data in files.items():
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)


def pack_files(files: dict) -> bytes:
    names = sorted(files)
    index = bytearray(_PACK_HEAD.pack(PACK_MAGIC, FORMAT_VERSION, 0, len(names)))
    entries_size = sum(2 + len(n.encode()) + _PACK_ENTRY.size for n in names)
    offset = len(index) + entries_size
    body = []
    for n in names:
        raw = n.encode()
        index += struct.pack("<H", len(raw)) + raw + _PACK_ENTRY.pack(offset, len(files[n]))
        offset += len(files[n])
        body.append(files[n])
    return bytes(index) + b"".join(body)


def unpack_files(data: bytes) -> dict:
    try:
        magic, version, _, count = _PACK_HEAD.unpack_from(data, 0)
        if magic != PACK_MAGIC:
            raise ArchiveCorruptionError(f"packed archive has bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatVersionError(f"packed archive version {version} unsupported")
        pos = _PACK_HEAD.size
        files = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            off, length = _PACK_ENTRY.unpack_from(data, pos)
            pos += _PACK_ENTRY.size
            if off + length > len(data):
                raise ArchiveCorruptionError(f"packed archive truncated inside {name}")
            files[name] = data[off : off + length]
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArchiveCorruptionError(f"packed archive index is malformed ({exc})") from None
    return files


def save(spec: WorkloadSpec, out, *, packed=False, json_graphs=False, config=None) -> SaveResult:
    """Capture ``spec`` and write its archive to ``out``.

    The archive is written next to ``out`` under a temporary name and
    renamed into place, so a failed SAVE leaves nothing behind.
    """
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    saved = capture(spec, config)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}-{threading.get_ident()}"
    try:
        with phase("write-archive"):
            files = archive_files(saved, json_graphs)
            if packed:
                tmp.write_bytes(pack_files(files))
            else:
                tmp.mkdir()
                _write_tree(tmp, files)
            if out.is_dir():
                shutil.rmtree(out)
            elif out.exists():
                out.unlink()
            os.replace(tmp, out)
    except BaseException:
        if tmp.is_dir():
            shutil.rmtree(tmp, ignore_errors=True)
        elif tmp.exists():
            tmp.unlink()
        raise
    saved.path = out
    return saved


# -- reading archives -----------------------------------------------------------


class Archive:
    """Read access to a directory or packed archive, with digest checks."""

    def __init__(self, path, verify=True):
        self.path = Path(path)
        if self.path.is_dir():
            self._files = None
        elif self.path.is_file():
            self._files = unpack_files(self.path.read_bytes())
        else:
            raise ArchiveError(f"archive {self.path} does not exist")
        self._tmp = None
        try:
            self.manifest = json.loads(self._raw(MANIFEST))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ArchiveCorruptionError(f"{MANIFEST} is not valid JSON ({exc})") from None
        self._check_manifest()
        if verify:
            self.verify()

    def _raw(self, name) -> bytes:
        if self._files is not None:
            try:
                return self._files[name]
            except KeyError:
                raise ArchiveCorruptionError(f"archive is missing {name}") from None
        try:
            return (self.path / name).read_bytes()
        except FileNotFoundError:
            raise ArchiveCorruptionError(f"archive is missing {name}") from None

    def _check_manifest(self):
        m = self.manifest
        try:
            if m["format_version"] != FORMAT_VERSION:
                raise FormatVersionError(f"archive format {m['format_version']} unsupported (expected {FORMAT_VERSION})")
            if m["hash_algorithm"]["id"] != HASH_ALGORITHM_ID:
                raise FormatVersionError(f"archive uses unknown hash algorithm {m['hash_algorithm']}")
            for key in ("allocator", "grouping", "workload", "files", "comm", "kv_cache_bytes"):
                m[key]
        except (KeyError, TypeError) as exc:
            raise ArchiveCorruptionError(f"{MANIFEST} is missing field {exc}") from None
        for ref in (m.get("memlayout"), m.get("graphs"), m.get("catalog"), m.get("patch_table")):
            if ref not in m["files"]:
                raise ArchiveCorruptionError(f"{MANIFEST} references {ref!r}, which the archive does not list")

    def verify(self):
        for name, entry in self.manifest["files"].items():
            data = self._raw(name)
            if len(data) != entry["size"] or digest128(data).hex() != entry["digest"]:
                raise ArchiveCorruptionError(f"{name} does not match its recorded digest")

    def read(self, name) -> bytes:
        return self._raw(name)

    def file_sizes(self) -> dict:
        return {name: e["size"] for name, e in self.manifest["files"].items()}

    def total_bytes(self) -> int:
        if self._files is not None:
            return self.path.stat().st_size
        return sum(p.stat().st_size for p in self.path.rglob("*") if p.is_file())

    # binary source protocol used by KernelResolver
    def read_binary(self, h) -> bytes:
        name = f"{BINARIES}/{hex_hash(h)}.bin"
        if name not in self.manifest["files"]:
            raise FileNotFoundError(name)
        return self._raw(name)

    def binary_path(self, h) -> Path:
        name = f"{BINARIES}/{hex_hash(h)}.bin"
        if self._files is None:
            return self.path / name
        if self._tmp is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="foundry-bin-")
        path = Path(self._tmp.name) / f"{hex_hash(h)}.bin"
        if not path.exists():
            path.write_bytes(self._raw(name))
        return path

    @property
    def spec(self) -> WorkloadSpec:
        return WorkloadSpec.from_dict(self.manifest["workload"]["spec"])

    def grouping(self) -> GroupingManifest:
        try:
            return GroupingManifest.from_dict(self.manifest["grouping"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ArchiveCorruptionError(f"grouping in {MANIFEST} is malformed ({exc})") from None

    def catalog(self) -> Catalog:
        return Catalog.from_bytes(self._raw(self.manifest["catalog"]))

    def patch_table(self) -> PatchTable:
        return PatchTable.from_bytes(self._raw(self.manifest["patch_table"]))

    def window_log(self) -> MemoryEventLog:
        return MemoryEventLog.from_bytes(self._raw(self.manifest["memlayout"]))

    def container(self) -> graphio.GraphContainer:
        return graphio.GraphContainer(self._raw(self.manifest["graphs"]))


def open_archive(path, verify=True) -> Archive:
    with phase("open-archive"):
        return Archive(path, verify)


# -- LOAD -------------------------------------------------------------------------


@dataclass
class LoadOptions:
    rank: int = 0
    world: int = 1
    prealloc: bool = True
    prep_lanes: int = 8
    naive: bool = False
    # fault-injection hooks
    skip_restore: bool = False
    base_override: Optional[int] = None
    extra_prewindow_alloc: int = 0

    def validate(self):
        if self.world < 1 or not 0 <= self.rank < self.world:
            raise ValueError(f"rank {self.rank} is outside world of size {self.world}")
        return self


class _NaiveServer:
    """Baseline: build and instantiate every graph individually."""

    def __init__(self, ctx, container, grouping, resolver, transform):
        self.ctx = ctx
        self.container = container
        self.grouping = grouping
        self.resolver = resolver
        self.transform = transform
        self.execs = {}
        self.updates = 0

    def build_templates(self):
        for grp in self.grouping.groups:
            for label in grp.members:
                g = self.transform(self.container.graph(grp.locator(label)))
                handle = self.ctx.build_graph(g, self.resolver)
                self.execs[label] = self.ctx.instantiate(handle)
                self.ctx.destroy_graph(handle)

    def prepare_all(self, lanes=1):
        return []

    def serve(self, label):
        return self.execs[label]


@dataclass
class LoadedInstance:
    archive: Archive
    ctx: DeviceContext
    region: object
    server: object
    resolver: KernelResolver
    grouping: GroupingManifest
    patch_table: PatchTable
    options: LoadOptions
    load_counters: dict
    timings: dict

    @property
    def rank(self):
        return self.options.rank

    @property
    def world(self):
        return self.options.world

    def serve(self, label):
        return self.server.serve(label)

    def replay(self, label):
        return self.ctx.replay(self.serve(label))

    def replay_all(self, labels=None):
        labels = self.grouping.labels() if labels is None else labels
        return {b: self.replay(b) for b in labels}

    def counters(self):
        return self.ctx.counter_report()


def load(path_or_archive, options: Optional[LoadOptions] = None, **kw) -> LoadedInstance:
    """Reconstruct a serving context for one rank without warmup or capture."""
    options = (options or LoadOptions(**kw)).validate()
    t0 = time.perf_counter()
    archive = path_or_archive if isinstance(path_or_archive, Archive) else open_archive(path_or_archive)
    timings = {"open": time.perf_counter() - t0}
    m = archive.manifest
    with phase("read-manifest"):
        spec = archive.spec.validate()
        grouping = archive.grouping()
        catalog = archive.catalog()
        table = archive.patch_table()
        log = archive.window_log()
        container = archive.container()
        alloc = m["allocator"]
        base = options.base_override if options.base_override is not None else alloc["base"]
        config = RegionConfig(base, alloc["capacity"], alloc["granularity"])
        if log.final_offset != alloc["final_offset"]:
            raise ArchiveCorruptionError("allocator final offset disagrees with the memory event log")
        if table and not any(b.hash == table.real_hash for b in catalog.binaries):
            raise ArchiveCorruptionError("patch table needs the real communication binary, which is not archived")

    ctx = DeviceContext()
    t = time.perf_counter()
    with phase("restore-binaries"):
        resolver = KernelResolver(ctx)
        if not options.skip_restore:
            resolver.restore(catalog, archive)
    timings["restore"] = time.perf_counter() - t

    with phase("reserve"):
        region = reserve(ctx, config, Phase.LOAD)
    if options.prealloc:
        with phase("preallocate"):
            region.preallocate(alloc["final_offset"])

    rank, world = options.rank, options.world

    def transform(g):
        return patch_graph(g, table.entries_for(g.label), table.real_hash, rank, world)

    if options.naive:
        server = _NaiveServer(ctx, container, grouping, resolver, transform)
    else:
        server = Templater(ctx, grouping, container, resolver, transform)

    def foreground():
        with phase("init-allocations"):
            run_init_allocations(region, Workload(spec).alloc_plan)
            if options.extra_prewindow_alloc:
                region.allocate(options.extra_prewindow_alloc)
        with phase("replay-capture-window"):
            region.replay_capture_window(log)

    def build():
        with phase("build-templates"):
            server.build_templates()

    def prepare():
        with phase("prepare-params"):
            server.prepare_all(options.prep_lanes)

    t = time.perf_counter()
    if options.prealloc:
        # Every embedded address is already mapped, so construction can
        # overlap the foreground allocation sequence.
        with ThreadPoolExecutor(max_workers=2, thread_name_prefix="foundry-load") as pool:
            builder = pool.submit(build)
            preparer = pool.submit(prepare)
            fg_error = None
            try:
                foreground()
            except BaseException as exc:
                fg_error = exc
            errors = [fg_error] + [f.exception() for f in (builder, preparer)]
    else:
        errors = []
        for step in (foreground, build, prepare):
            try:
                step()
            except BaseException as exc:
                errors.append(exc)
                break
    for exc in errors:
        if exc is not None:
            raise exc
    timings["reconstruct"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    return LoadedInstance(
        archive, ctx, region, server, resolver, grouping, table, options, ctx.counter_report(), timings
    )


# -- reference traces, inspection, diff, bench -------------------------------------------


def reference_traces(saved: SaveResult, rank=0, world=1, labels=None):
    """Trace of each captured graph built directly in the SAVE context.

    Rank patches are applied first, so the result is what rank ``rank`` of
    a ``world``-rank deployment must reproduce.
    """
    table = saved.patch_table
    out = {}
    for g in saved.graphs:
        if labels is not None and g.label not in labels:
            continue
        pg = patch_graph(g, table.entries_for(g.label), table.real_hash, rank, world)
        handle = saved.ctx.build_graph(pg)
        exe = saved.ctx.instantiate(handle)
        saved.ctx.destroy_graph(handle)
        out[g.label] = saved.ctx.replay(exe)
    return out


def inspect(path) -> str:
    archive = open_archive(path)
    m = archive.manifest
    grouping = archive.grouping()
    catalog = archive.catalog()
    sizes = archive.file_sizes()
    alloc = m["allocator"]
    spec = m["workload"]["spec"]
    lines = [
        f"archive: {archive.path}",
        f"format version {m['format_version']}, hash {m['hash_algorithm']['name']}",
        f"workload: {spec['name']} (digest {m['workload']['digest']}), batch sizes 1..{spec['max_batch']}",
        f"allocator: base {alloc['base']:#x}, capacity {alloc['capacity']:#x}, granularity {alloc['granularity']:#x}",
        f"  capture window starts at offset {alloc['window_start_offset']:#x}, final offset {alloc['final_offset']:#x}",
        f"graphs: {grouping.total}, templates: {grouping.template_count}, "
        f"served by update: {grouping.update_served} ({100 * grouping.update_fraction:.1f}%)",
        "groups (representative: members):",
    ]
    for g in grouping.groups:
        lo, hi = min(g.members), max(g.members)
        lines.append(f"  {g.representative:>4}: {len(g.members)} graphs, batch {lo}..{hi}")
    lines.append(f"comm: {m['comm']['patched_nodes']} patched nodes, world placeholder {m['comm']['world_placeholder']}")
    lines.append("binaries:")
    for b in catalog.binaries:
        flags = [n for n, bit in (("init", 1), ("prelinked", 2), ("comm-stub", 4), ("comm", 8)) if b.flags & bit]
        lines.append(
            f"  {hex_hash(b.hash)}  {sizes[f'{BINARIES}/{b.filename}']:>8} bytes  "
            f"{len(b.entrypoints)} kernels  {b.variant.name.lower()}  {','.join(flags) or '-'}"
        )
    binary_bytes = sum(v for k, v in sizes.items() if k.startswith(BINARIES + "/"))
    meta_bytes = sum(sizes.values()) - binary_bytes
    lines.append(f"bytes: metadata {meta_bytes}, binaries {binary_bytes}, total {meta_bytes + binary_bytes}")
    for name in (GRAPHS, MEMLAYOUT, CATALOG, PATCH):
        lines.append(f"  {name}: {sizes[name]}")
    return "\n".join(lines)


def diff_archives(a, b) -> list:
    """Structural differences between two archives; empty when equivalent."""
    A, B = open_archive(a), open_archive(b)
    out = []
    ma, mb = dict(A.manifest), dict(B.manifest)
    fa, fb = ma.pop("files"), mb.pop("files")
    for key in sorted(set(ma) | set(mb)):
        if ma.get(key) != mb.get(key):
            out.append(f"manifest.{key} differs")
    for name in sorted(set(fa) | set(fb)):
        if name not in fa or name not in fb:
            out.append(f"{name} only in {'b' if name in fb else 'a'}")
        elif fa[name]["digest"] != fb[name]["digest"] and name != GRAPHS:
            out.append(f"{name} differs")
    if fa.get(GRAPHS, {}).get("digest") != fb.get(GRAPHS, {}).get("digest"):
        ca, cb = A.container(), B.container()
        la, lb = set(ca.labels), set(cb.labels)
        for label in sorted(la ^ lb):
            out.append(f"graph {label} only in {'a' if label in la else 'b'}")
        for label in sorted(la & lb):
            d = graph_diff(ca.graph_by_label(label), cb.graph_by_label(label))
            out.extend(f"graph {label}: {line}" for line in d.lines())
    return out


def bench(spec: WorkloadSpec, mode: str, workdir=None) -> dict:
    """Wall time, driver counters, update-served fraction and archive size."""
    if mode not in ("save", "load", "naive"):
        raise ValueError(f"unknown bench mode {mode!r}")
    with tempfile.TemporaryDirectory(prefix="foundry-bench-", dir=workdir) as tmp:
        path = Path(tmp) / "archive"
        t = time.perf_counter()
        saved = save(spec, path)
        save_s = time.perf_counter() - t
        archive = open_archive(path)
        metrics = {
            "mode": mode,
            "workload": spec.name,
            "graphs": saved.grouping.total,
            "templates": saved.grouping.template_count,
            "update_fraction": saved.grouping.update_fraction,
            "archive_bytes": archive.total_bytes(),
        }
        if mode == "save":
            metrics.update(wall_s=save_s, counters=saved.counters)
            return metrics
        t = time.perf_counter()
        inst = load(archive, LoadOptions(naive=(mode == "naive")))
        before = inst.counters()
        inst.replay_all()
        after = inst.counters()
        metrics.update(
            wall_s=time.perf_counter() - t,
            load_counters=inst.load_counters,
            serve_counters=counter_delta(before, after),
            construction_calls=after["graph_mutation"] + after["instantiate"],
            update_calls=after["update"],
        )
        return metrics


__all__ = [
    "Archive",
    "LoadOptions",
    "LoadedInstance",
    "SaveResult",
    "bench",
    "capture",
    "diff_archives",
    "inspect",
    "load",
    "open_archive",
    "reference_traces",
    "save",
]
