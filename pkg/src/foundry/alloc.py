"""Deterministic bump allocation over a reserved virtual-address region.

Every allocation lands directly after the previous one, so the same base
and the same request sequence always yield the same addresses. Frees
unmap but never rewind. Allocations made while a capture window is open
are logged so LOAD can replay them without re-running capture.
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Optional

from foundry.errors import AllocationError, ArchiveCorruptionError, LayoutDivergenceError, OutOfRegionError

DEFAULT_BASE = 0x7000_0000_0000
DEFAULT_CAPACITY = 4 << 30
DEFAULT_GRANULARITY = 64 << 10

BASE_ENV = "FOUNDRY_BASE_ADDR"


class Phase(Enum):
    SAVE = "SAVE"
    LOAD = "LOAD"


class Window(IntEnum):
    PRE_CAPTURE = 0
    CAPTURE = 1


@dataclass(frozen=True)
class RegionConfig:
    base: int = DEFAULT_BASE
    capacity: int = DEFAULT_CAPACITY
    granularity: int = DEFAULT_GRANULARITY

    @classmethod
    def from_env(cls, **kw):
        """Default config, with the base taken from ``FOUNDRY_BASE_ADDR`` if set."""
        raw = os.environ.get(BASE_ENV)
        if raw:
            kw.setdefault("base", int(raw, 0))
        return cls(**kw)


@dataclass(frozen=True)
class AllocationRecord:
    seq: int
    size: int
    address: int
    length: int
    window: Window


@dataclass
class MemoryEventLog:
    base: int
    capacity: int
    granularity: int
    start_offset: int
    final_offset: int
    records: list = field(default_factory=list)

    _HEAD = struct.Struct("<6Q")
    _REC = struct.Struct("<4QB")

    def to_bytes(self) -> bytes:
        out = [
            self._HEAD.pack(
                self.base, self.capacity, self.granularity, self.start_offset, self.final_offset, len(self.records)
            )
        ]
        out.extend(self._REC.pack(r.seq, r.size, r.address, r.length, r.window) for r in self.records)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MemoryEventLog":
        if len(data) < cls._HEAD.size:
            raise ArchiveCorruptionError("memlayout: truncated header")
        base, cap, gran, start, final, count = cls._HEAD.unpack_from(data, 0)
        if len(data) != cls._HEAD.size + count * cls._REC.size:
            raise ArchiveCorruptionError(f"memlayout: expected {count} records, size is {len(data)} bytes")
        recs = []
        for i in range(count):
            seq, size, addr, length, tag = cls._REC.unpack_from(data, cls._HEAD.size + i * cls._REC.size)
            recs.append(AllocationRecord(seq, size, addr, length, Window(tag)))
        return cls(base, cap, gran, start, final, recs)


def round_up(n, g):
    return (n + g - 1) // g * g


class VirtualRegion:
    """A reserved address range with a monotonic bump offset.

    ``ctx`` is the device context whose mapped-range set the region keeps
    current; allocation requests serialize on the region's own lock.
    """

    def __init__(self, ctx, config: RegionConfig, phase: Phase = Phase.SAVE):
        self.ctx = ctx
        self.base = config.base
        self.capacity = config.capacity
        self.granularity = config.granularity
        self.phase = phase
        self.offset = 0
        self.records = []
        self.live = {}
        self.prealloc_end: Optional[int] = None
        self._window: Optional[MemoryEventLog] = None
        self._lock = threading.Lock()

    @property
    def config(self):
        return RegionConfig(self.base, self.capacity, self.granularity)

    def allocate(self, size: int) -> int:
        return self._allocate(size, None)

    def _allocate(self, size, window):
        if size <= 0:
            raise AllocationError(f"allocation size must be positive, got {size}")
        with self._lock:
            length = round_up(size, self.granularity)
            limit = self.capacity if self.prealloc_end is None else self.prealloc_end
            if self.offset + length > limit:
                what = "preallocated range" if self.prealloc_end is not None else "region"
                raise OutOfRegionError(
                    f"allocation of {size:#x} bytes at offset {self.offset:#x} exceeds the {what} ({limit:#x})"
                )
            addr = self.base + self.offset
            if self.prealloc_end is None:
                self.ctx.map_range(addr, length)
            if window is None:
                window = Window.CAPTURE if self._window is not None else Window.PRE_CAPTURE
            rec = AllocationRecord(len(self.records), size, addr, length, window)
            self.records.append(rec)
            if self._window is not None:
                self._window.records.append(rec)
            self.live[addr] = length
            self.offset += length
            return addr

    def free(self, address: int) -> None:
        with self._lock:
            try:
                length = self.live.pop(address)
            except KeyError:
                raise AllocationError(f"free of unknown address {address:#x}") from None
            self.ctx.unmap_range(address, length)

    def record_capture_window(self) -> None:
        with self._lock:
            if self._window is not None:
                raise AllocationError("capture window already open")
            self._window = MemoryEventLog(
                self.base, self.capacity, self.granularity, self.offset, self.offset
            )

    def end_capture_window(self) -> MemoryEventLog:
        with self._lock:
            if self._window is None:
                raise AllocationError("no capture window is open")
            log, self._window = self._window, None
            log.final_offset = self.offset
            return log

    def replay_capture_window(self, log: MemoryEventLog) -> None:
        """Re-issue the logged capture-window allocations at their recorded offsets."""
        if self.offset != log.start_offset:
            raise LayoutDivergenceError(
                f"allocation sequence diverged before the capture window: offset {self.offset:#x}, "
                f"archive expects {log.start_offset:#x}"
            )
        for rec in log.records:
            addr = self._allocate(rec.size, Window.CAPTURE)
            if addr - self.base != rec.address - log.base:
                raise LayoutDivergenceError(
                    f"capture-window allocation {rec.seq} landed at offset {addr - self.base:#x}, "
                    f"archive expects {rec.address - log.base:#x}"
                )
        if self.offset != log.final_offset:
            raise LayoutDivergenceError(
                f"offset after window replay is {self.offset:#x}, archive expects {log.final_offset:#x}"
            )

    def preallocate(self, final_offset: int) -> None:
        """Map [base, base + final_offset) in one call; later allocations only bump."""
        with self._lock:
            if final_offset > self.capacity:
                raise OutOfRegionError(f"preallocation of {final_offset:#x} exceeds capacity {self.capacity:#x}")
            if final_offset % self.granularity:
                raise AllocationError(f"preallocation size {final_offset:#x} is not granule aligned")
            if self.offset or self.prealloc_end is not None:
                raise AllocationError("preallocate must precede every allocation")
            if final_offset:
                self.ctx.map_range(self.base, final_offset)
            self.prealloc_end = final_offset


def reserve(ctx, config: RegionConfig = RegionConfig(), phase: Phase = Phase.SAVE) -> VirtualRegion:
    if config.capacity <= 0:
        raise AllocationError("region capacity must be positive")
    g = config.granularity
    if g <= 0 or g & (g - 1):
        raise AllocationError(f"granularity {g:#x} is not a power of two")
    if config.capacity % g:
        raise AllocationError(f"capacity {config.capacity:#x} is not a multiple of granularity {g:#x}")
    if config.base % g:
        raise AllocationError(f"base {config.base:#x} is not granule aligned")
    ctx.reserve_va(config.base, config.capacity)
    return VirtualRegion(ctx, config, phase)
