"""Deterministic synthetic decode workloads.

A workload stands in for an inference engine's warmup: it names the kernel
binaries to load, the allocations made before capture (weights, KV pool,
I/O buffers), one capture-window scratch buffer per batch size, and the
per-batch work sequence that gets captured. Kernel selection and launch
attributes change only at the configured batch-size thresholds, so the
number of distinct topologies is known up front.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from foundry import binfmt
from foundry.driver import EmptyOp, Launch, LoadVariant, Memcpy, Memset, RecordEvent, WaitEvent
from foundry.errors import WorkloadSpecError
from foundry.graph import DEFAULT_ATTRS, FuncAttrs, KernelNodeAttrs

KiB = 1 << 10
MiB = 1 << 20

COMM_MODES = ("none", "spmd")
COLLECTIVE_CYCLE = ("dispatch", "combine", "all_reduce")

# Tunable GEMM slots per layer; each has two topology-changing features.
GEMM_SLOTS = ("qkv_proj", "o_proj", "gate_up_proj", "down_proj")
GEMM_ARG_SIZE = 1720
GEMM_TILES = ((64, 8), (128, 16), (168, 128), (256, 128))
REFERENCE_GEMM = "nvjet_tst_168x128_64x5_1x2_h_bz_TNN"


@dataclass(frozen=True)
class WorkloadSpec:
    name: str = "custom"
    seed: int = 0
    max_batch: int = 8
    layers: int = 2
    kernels_per_layer: int = 7
    thresholds: tuple = ()
    batch1_specialization: bool = False
    hidden_offset_density: float = 0.05
    comm_mode: str = "none"
    collectives_per_layer: int = 0
    kv_cache_bytes: int = 64 * MiB
    weight_bytes_per_layer: int = 2 * MiB
    scratch_bytes_per_seq: int = 16 * KiB
    stage_divergent: bool = False
    rank_uniform: bool = True
    raw_comm: bool = False

    MIN_KERNELS_PER_LAYER = 7

    def validate(self) -> "WorkloadSpec":
        if self.max_batch < 1:
            raise WorkloadSpecError(f"max_batch must be >= 1, got {self.max_batch}")
        if self.layers < 1:
            raise WorkloadSpecError(f"layers must be >= 1, got {self.layers}")
        if self.kernels_per_layer < self.MIN_KERNELS_PER_LAYER:
            raise WorkloadSpecError(
                f"kernels_per_layer must be >= {self.MIN_KERNELS_PER_LAYER}, got {self.kernels_per_layer}"
            )
        ts = list(self.thresholds)
        if ts != sorted(set(ts)):
            raise WorkloadSpecError(f"thresholds must be strictly increasing: {ts}")
        if ts and (ts[0] < 2 or ts[-1] > self.max_batch):
            raise WorkloadSpecError(f"thresholds must lie in [2, {self.max_batch}]: {ts}")
        if not 0 < self.hidden_offset_density <= 1:
            raise WorkloadSpecError(f"hidden_offset_density must be in (0, 1], got {self.hidden_offset_density}")
        if self.comm_mode not in COMM_MODES:
            raise WorkloadSpecError(f"comm_mode must be one of {COMM_MODES}, got {self.comm_mode!r}")
        if self.comm_mode == "none" and (self.collectives_per_layer or self.raw_comm):
            raise WorkloadSpecError("collectives need comm_mode = spmd")
        if self.comm_mode == "spmd" and self.collectives_per_layer < 1:
            raise WorkloadSpecError("comm_mode = spmd needs collectives_per_layer >= 1")
        if self.stage_divergent:
            raise WorkloadSpecError(
                "stage-divergent (pipeline-parallel) workloads cannot be templated from a single-rank SAVE"
            )
        if self.kv_cache_bytes <= 0 or self.weight_bytes_per_layer <= 0 or self.scratch_bytes_per_seq <= 0:
            raise WorkloadSpecError("buffer sizes must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorkloadSpecError(f"unknown workload keys: {sorted(unknown)}")
        d = dict(d)
        if "thresholds" in d:
            d["thresholds"] = tuple(d["thresholds"])
        return cls(**d)

    def digest(self) -> str:
        raw = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.blake2b(raw, digest_size=16).hexdigest()


PRESETS = {
    "micro": WorkloadSpec(
        name="micro", seed=7, max_batch=8, layers=2, kernels_per_layer=7, thresholds=(4,),
        kv_cache_bytes=4 * MiB, weight_bytes_per_layer=256 * KiB,
    ),
    "dense-small": WorkloadSpec(
        name="dense-small", seed=11, max_batch=512, layers=12, kernels_per_layer=8,
        thresholds=(2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 160, 192, 256, 320, 384, 448),
        kv_cache_bytes=512 * MiB,
    ),
    "moe-spmd": WorkloadSpec(
        name="moe-spmd", seed=23, max_batch=512, layers=10, kernels_per_layer=9,
        thresholds=(3, 4, 8, 16, 24, 32, 64, 96, 128, 192, 256, 320, 384),
        batch1_specialization=True, comm_mode="spmd", collectives_per_layer=2,
        kv_cache_bytes=256 * MiB,
    ),
}


def presets() -> dict:
    return dict(PRESETS)


def preset(name: str) -> WorkloadSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise WorkloadSpecError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def parse_spec_text(text: str) -> WorkloadSpec:
    """Read ``key = value`` lines; ``preset = <name>`` seeds the defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise WorkloadSpecError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise WorkloadSpecError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    base = preset(values.pop("preset")) if "preset" in values else WorkloadSpec()
    types = {f.name: f.type for f in fields(WorkloadSpec)}
    updates = {}
    for key, value in values.items():
        kind = types.get(key)
        if kind is None:
            raise WorkloadSpecError(f"unknown workload key {key!r}")
        try:
            if kind == "str":
                updates[key] = value
            elif kind == "bool":
                updates[key] = _BOOL[value.lower()]
            elif kind == "float":
                updates[key] = float(value)
            elif kind == "tuple":
                updates[key] = tuple(int(v, 0) for v in value.replace(",", " ").split())
            else:
                updates[key] = int(value, 0)
        except (KeyError, ValueError):
            raise WorkloadSpecError(f"bad value for {key}: {value!r}") from None
    fields_now = base.to_dict()
    fields_now.update(updates)
    return WorkloadSpec.from_dict(fields_now).validate()


def load_spec(ref: str) -> WorkloadSpec:
    """A preset name or a path to a key = value file."""
    if ref in PRESETS:
        return PRESETS[ref]
    path = Path(ref)
    if not path.is_file():
        raise WorkloadSpecError(f"{ref!r} is neither a preset nor a readable file")
    return parse_spec_text(path.read_text())


# -- closed-form expectations ---------------------------------------------------


def variant_ranges(spec: WorkloadSpec):
    """Batch-size ranges [lo, hi] within which the topology is fixed."""
    bounds = [1] + list(spec.thresholds) + [spec.max_batch + 1]
    ranges = [(lo, hi - 1) for lo, hi in zip(bounds, bounds[1:]) if hi > lo]
    if spec.batch1_specialization and ranges[0][0] == 1 and ranges[0][1] > 1:
        ranges = [(1, 1), (2, ranges[0][1])] + ranges[1:]
    return ranges


def variant_index(spec: WorkloadSpec, b: int) -> int:
    """Index of the threshold range b falls in (batch-1 specialization aside)."""
    return sum(1 for t in spec.thresholds if b >= t)


def feature_mask(v: int) -> int:
    """Gray code of the variant index: neighbouring ranges differ in one feature."""
    return v ^ (v >> 1)


@dataclass(frozen=True)
class ExpectedOutcome:
    group_count: int
    group_ranges: tuple
    group_sizes: tuple
    final_offset: int
    node_counts: dict

    @property
    def graph_count(self):
        return sum(self.group_sizes)


# -- binaries ---------------------------------------------------------------------


@dataclass(frozen=True)
class BinarySpec:
    """A module the engine loads during warmup."""

    key: str
    payload: bytes = b""
    segments: tuple = ()
    variant: LoadVariant = LoadVariant.DATA
    options: bytes = b""

    @property
    def prelinked(self):
        return bool(self.segments)


@dataclass(frozen=True)
class AllocStep:
    name: str
    size: int
    free: bool = False


@dataclass(frozen=True)
class KernelDesc:
    binary: str
    name: str
    arg_size: int
    hidden: tuple
    scalar: int


def _hidden_offsets(rng, arg_size, density):
    slots = arg_size // 8
    n = max(1, min(slots - 1, round(density * slots)))
    return tuple(sorted(8 * s for s in rng.sample(range(slots), n)))


def _scalar_slot(arg_size, hidden):
    for off in range(0, arg_size - 7, 8):
        if off not in hidden:
            return off
    raise WorkloadSpecError(f"kernel with {arg_size}-byte arguments has no scalar slot")


class Workload:
    """Everything an engine does up to and including graph capture."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec.validate()
        self._rng = random.Random(spec.seed)
        self.kernels = {}
        self.binaries = self._make_binaries()
        self.alloc_plan = self._make_alloc_plan()

    # -- construction of the static pieces --

    def _kernel(self, binary, name, arg_size):
        hidden = _hidden_offsets(self._rng, arg_size, self.spec.hidden_offset_density)
        k = KernelDesc(binary, name, arg_size, hidden, _scalar_slot(arg_size, hidden))
        self.kernels[name] = k
        return binfmt.KernelEntry(name, arg_size, hidden, FuncAttrs(0, -1, 0, 0, 0, 0))

    def gemm_name(self, tile):
        m, n = tile
        return REFERENCE_GEMM if tile == (168, 128) else f"nvjet_tst_{m}x{n}_64x4_2x1_v_bz_TNT"

    def _make_binaries(self):
        spec = self.spec
        gemm = []
        for tile in GEMM_TILES:
            e = self._kernel("nvjet", self.gemm_name(tile), GEMM_ARG_SIZE)
            gemm.append(binfmt.KernelEntry(e.name, e.arg_size, e.hidden_offsets, FuncAttrs(206044, -1, 0, 0, 0, 0)))
        gemm.append(self._kernel("nvjet", "nvjet_splitk_reduce_bf16", 96))
        model = [
            self._kernel("model", name, size)
            for name, size in (
                ("embedding_lookup_kernel", 64),
                ("rms_norm_kernel", 64),
                ("paged_attention_v2_kernel", 256),
                ("paged_attention_split_kernel", 256),
                ("paged_attention_combine_kernel", 128),
                ("silu_and_mul_kernel", 64),
                ("argmax_sample_kernel", 64),
            )
        ]
        extras = spec.kernels_per_layer - WorkloadSpec.MIN_KERNELS_PER_LAYER
        seg_a = [self._kernel("fused", f"fused_add_bias_{j}", 96) for j in range(0, extras, 2)]
        seg_b = [self._kernel("fused", f"fused_add_bias_{j}", 96) for j in range(1, extras, 2)]
        seg_b.append(self._kernel("fused", "fused_residual_add", 96))
        unused = [binfmt.KernelEntry("debug_checksum_kernel", 32, (0,), FuncAttrs())]

        out = [
            BinarySpec("nvjet", binfmt.encode(binfmt.SimBinary(tuple(gemm), code=self._code("nvjet", 4096)))),
            BinarySpec(
                "model",
                binfmt.encode(binfmt.SimBinary(tuple(model), code=self._code("model", 2048))),
                variant=LoadVariant.WITH_OPTIONS,
                options=b"--max-registers=128",
            ),
            BinarySpec(
                "fused",
                segments=(
                    binfmt.encode(binfmt.SimBinary(tuple(seg_a), code=self._code("fa", 512), kind=binfmt.KIND_RELOCATABLE, link_tag="fused")),
                    binfmt.encode(binfmt.SimBinary(tuple(seg_b), code=self._code("fb", 512), kind=binfmt.KIND_RELOCATABLE, link_tag="fused")),
                ),
            ),
            BinarySpec("debug", binfmt.encode(binfmt.SimBinary(tuple(unused), code=self._code("dbg", 64)))),
        ]
        return out

    def _code(self, tag, n):
        h = hashlib.blake2b(f"{self.spec.seed}:{tag}".encode(), digest_size=64).digest()
        return (h * (n // 64 + 1))[:n]

    def _make_alloc_plan(self):
        spec = self.spec
        plan = [
            AllocStep("input", 64 * KiB),
            AllocStep("io", spec.max_batch * 8 * KiB),
            AllocStep("profile_workspace", 4 * MiB, free=True),
        ]
        plan += [AllocStep(f"weights.{l}", spec.weight_bytes_per_layer) for l in range(spec.layers)]
        plan.append(AllocStep("lm_head", spec.weight_bytes_per_layer))
        plan.append(AllocStep("kv_cache", spec.kv_cache_bytes))
        if spec.comm_mode == "spmd":
            plan.append(AllocStep("comm_heap", 8 * MiB))
        return plan

    # -- capture -------------------------------------------------------------

    def capture_order(self):
        """Largest batch first, as engines do."""
        return list(range(self.spec.max_batch, 0, -1))

    def scratch_size(self, b):
        return b * self.spec.scratch_bytes_per_seq

    def ranges(self):
        return variant_ranges(self.spec)

    def expected(self, granularity) -> ExpectedOutcome:
        from foundry.alloc import round_up

        offset = sum(round_up(s.size, granularity) for s in self.alloc_plan)
        offset += sum(round_up(self.scratch_size(b), granularity) for b in range(1, self.spec.max_batch + 1))
        ranges = tuple(self.ranges())
        return ExpectedOutcome(
            len(ranges),
            ranges,
            tuple(hi - lo + 1 for lo, hi in ranges),
            offset,
            {b: self.node_count(b) for b in range(1, self.spec.max_batch + 1)},
        )

    def node_count(self, b):
        spec = self.spec
        mask = feature_mask(variant_index(spec, b))
        per_layer = spec.kernels_per_layer + spec.collectives_per_layer
        per_layer += 2 * sum(1 for i in range(len(GEMM_SLOTS)) if mask >> (2 * i + 1) & 1)
        if spec.batch1_specialization and b == 1:
            per_layer += 1
        # memcpy, side memset, embedding, residual add, final norm, lm_head, sampler, tail empty
        return 8 + spec.layers * per_layer

    def _args(self, k: KernelDesc, layer, b, addr, tag):
        """Argument buffer: opaque filler, the batch size, and live pointers."""
        buf = bytearray(hashlib.blake2b(f"{self.spec.seed}:{k.name}:{tag}:{layer}".encode(), digest_size=64).digest() * (k.arg_size // 64 + 1))[: k.arg_size]
        struct.pack_into("<Ii", buf, k.scalar, b, layer)
        bufs = (f"weights.{layer}" if layer >= 0 else "lm_head", "io", "kv_cache", "scratch", "input")
        for j, off in enumerate(k.hidden):
            name = bufs[(j + layer) % len(bufs)]
            base, size = addr(name, b)
            struct.pack_into("<Q", buf, off, base + (j * 256) % size)
        return bytes(buf)

    def work(self, b, env):
        """The launch sequence for batch size ``b``.

        ``env`` supplies ``kernel(binary_key, name)`` -> handle,
        ``addr(buffer, b)`` -> (address, size) and, for SPMD workloads,
        ``comm`` (the stub layer) and ``raw_comm_kernel(kind)``.
        """
        spec = self.spec
        if not 1 <= b <= spec.max_batch:
            raise WorkloadSpecError(f"batch size {b} outside [1, {spec.max_batch}]")
        v = variant_index(spec, b)
        mask = feature_mask(v)
        split_attn = spec.batch1_specialization and b == 1
        items = []
        kern = self.kernels

        def launch(name, layer, grid, block=(128, 1, 1), smem=0, attrs=DEFAULT_ATTRS, tag=""):
            k = kern[name]
            items.append(Launch(env.kernel(k.binary, name), grid, block, smem, self._args(k, layer, b, env.addr, tag), attrs))

        io, io_size = env.addr("io", b)
        inp, _ = env.addr("input", b)
        scratch, scratch_size = env.addr("scratch", b)
        items.append(Memcpy(io, inp, min(b * 64, io_size)))
        items.append(RecordEvent(1, 0))
        items.append(WaitEvent(1, 1))
        items.append(Memset(scratch, 0, scratch_size, stream=1))
        items.append(RecordEvent(2, 1))
        launch("embedding_lookup_kernel", -1, (math.ceil(b / 4), 1, 1))
        items.append(WaitEvent(2, 0))

        tile = GEMM_TILES[min(3, (b - 1).bit_length() // 3)]
        gemm = self.gemm_name(tile)
        extras = spec.kernels_per_layer - WorkloadSpec.MIN_KERNELS_PER_LAYER
        coll = 0
        for layer in range(spec.layers):
            launch("rms_norm_kernel", layer, (b, 1, 1), (256, 1, 1))
            for slot, op in enumerate(GEMM_SLOTS):
                cluster = mask >> (2 * slot) & 1
                split_k = mask >> (2 * slot + 1) & 1
                attrs = KernelNodeAttrs(cluster_dim=(2, 1, 1), cluster_scheduling_policy=1) if cluster else DEFAULT_ATTRS
                grid = (2 + slot, math.ceil(b / tile[1]) * (2 if split_k else 1), 2 if split_k else 1)
                if split_k:
                    # zero the split-k workspace; its position pins which slot is split
                    items.append(Memset(scratch, 0, min(scratch_size, 4096 * (slot + 1))))
                launch(gemm, layer, grid, (384, 1, 1), 206044, attrs, tag=op)
                if split_k:
                    launch("nvjet_splitk_reduce_bf16", layer, (math.ceil(b / 8), 1, 1), tag=op)
                if op == "qkv_proj":
                    if split_attn:
                        launch("paged_attention_split_kernel", layer, (32, 8, 1), (256, 1, 1), 16384)
                        launch("paged_attention_combine_kernel", layer, (32, 1, 1))
                    else:
                        launch("paged_attention_v2_kernel", layer, (32, b, 1), (256, 1, 1), 16384)
                if op == "o_proj":
                    for _ in range(spec.collectives_per_layer):
                        kind = COLLECTIVE_CYCLE[coll % len(COLLECTIVE_CYCLE)]
                        coll += 1
                        items.append(self._collective(env, kind, layer, b))
                if op == "gate_up_proj":
                    launch("silu_and_mul_kernel", layer, (b, 1, 1))
            for j in range(extras):
                launch(f"fused_add_bias_{j}", layer, (math.ceil(b / 2), 1, 1))
        launch("fused_residual_add", -1, (math.ceil(b / 2), 1, 1))
        launch("rms_norm_kernel", -1, (b, 1, 1), (256, 1, 1), tag="final")
        launch(gemm, -1, (8, math.ceil(b / tile[1]), 1), (384, 1, 1), 206044, tag="lm_head")
        launch("argmax_sample_kernel", -1, (b, 1, 1))
        items.append(EmptyOp())
        return items

    def _collective(self, env, kind, layer, b):
        heap, heap_size = env.addr("comm_heap", b)
        io, _ = env.addr("io", b)
        scratch, _ = env.addr("scratch", b)
        send = scratch
        recv = heap + (layer * 2 * MiB // max(1, self.spec.layers)) % heap_size
        count = b * 4096
        if self.spec.raw_comm and layer == self.spec.layers - 1:
            return env.raw_comm(kind, send, recv, count, heap)
        return env.comm.collective(kind, send, recv, count, heap, grid=(max(1, b // 16), 1, 1))


def generate(spec: WorkloadSpec) -> Workload:
    return Workload(spec)
