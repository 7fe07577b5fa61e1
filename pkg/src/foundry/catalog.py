"""Kernel-binary extraction during SAVE and restoration during LOAD.

SAVE wraps module loads: each payload is copied, hashed and its
entrypoints enumerated into a catalog keyed by (content hash, mangled
name). LOAD loads every cataloged binary with the recorded variant and
options, runs device-side init only where SAVE flagged it, and resolves
kernel references by direct lookup.

``catalog.bin`` layout, little-endian::

    magic "FNDC" | version u16 | hash algorithm u8 | reserved u8 | binary count u32
    per binary: hash u64 | variant u8 | flags u8 | options (u32 length + bytes)
                entrypoint count u32 | per entrypoint: u16 length + utf-8 name
    referenced-kernel count u32 | per kernel: binary index u32 | entrypoint index u32
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

from foundry import binfmt
from foundry.driver import LoadVariant
from foundry.errors import ArchiveCorruptionError, FormatVersionError, UnresolvedKernelError
from foundry.graph import KernelRef
from foundry.hashing import HASH_ALGORITHM_ID, content_hash, hex_hash

FLAG_NEEDS_INIT = 0x01
FLAG_PRELINKED = 0x02
FLAG_COMM_STUB = 0x04
FLAG_COMM_REAL = 0x08

MAGIC = b"FNDC"
VERSION = 1

_HEAD = struct.Struct("<4sHBBI")
_BIN = struct.Struct("<QBBI")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_IDX = struct.Struct("<II")


@dataclass
class KernelBinary:
    hash: int
    payload: bytes
    variant: LoadVariant
    options: bytes
    entrypoints: tuple
    flags: int = 0

    @property
    def needs_device_init(self):
        return bool(self.flags & FLAG_NEEDS_INIT)

    @property
    def filename(self):
        return f"{hex_hash(self.hash)}.bin"


@dataclass
class Catalog:
    """Stored binaries plus the KernelRef -> (binary index, entrypoint index) map."""

    binaries: list = field(default_factory=list)
    entries: dict = field(default_factory=dict)

    def binary(self, h: int) -> KernelBinary:
        for b in self.binaries:
            if b.hash == h:
                return b
        raise KeyError(h)

    def hashes(self):
        return [b.hash for b in self.binaries]

    def lookup(self, ref: KernelRef):
        try:
            return self.entries[ref]
        except KeyError:
            raise UnresolvedKernelError(f"kernel {ref} is not in the catalog", ref=ref) from None

    def covers(self, ref: KernelRef) -> bool:
        return ref in self.entries

    def pruned(self, keep_refs) -> "Catalog":
        """Keep binaries that own a kept ref; index only the kept refs."""
        keep_refs = set(keep_refs)
        missing = [r for r in keep_refs if r.binary_hash not in self.hashes()]
        if missing:
            raise UnresolvedKernelError(f"{len(missing)} referenced kernels have no recorded binary", ref=missing[0])
        kept = [b for b in self.binaries if any(r.binary_hash == b.hash for r in keep_refs)]
        out = Catalog(kept)
        for i, b in enumerate(kept):
            for j, name in enumerate(b.entrypoints):
                ref = KernelRef(b.hash, name)
                if ref in keep_refs:
                    out.entries[ref] = (i, j)
        absent = keep_refs - set(out.entries)
        if absent:
            ref = sorted(absent, key=str)[0]
            raise UnresolvedKernelError(f"binary {hex_hash(ref.binary_hash)} has no entrypoint {ref.name}", ref=ref)
        return out

    def to_bytes(self) -> bytes:
        out = bytearray(_HEAD.pack(MAGIC, VERSION, HASH_ALGORITHM_ID, 0, len(self.binaries)))
        for b in self.binaries:
            out += _BIN.pack(b.hash, b.variant, b.flags, len(b.options))
            out += b.options
            out += _U32.pack(len(b.entrypoints))
            for name in b.entrypoints:
                raw = name.encode()
                out += _U16.pack(len(raw)) + raw
        refs = sorted(self.entries.items(), key=lambda kv: kv[1])
        out += _U32.pack(len(refs))
        for _, (bi, ei) in refs:
            out += _IDX.pack(bi, ei)
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Catalog":
        """Parse the index; payloads are attached later by the archive reader."""
        try:
            magic, version, algo, _, count = _HEAD.unpack_from(data, 0)
            if magic != MAGIC:
                raise ArchiveCorruptionError(f"catalog has bad magic {magic!r}")
            if version != VERSION:
                raise FormatVersionError(f"catalog version {version} unsupported")
            if algo != HASH_ALGORITHM_ID:
                raise FormatVersionError(f"catalog uses unknown hash algorithm {algo}")
            pos = _HEAD.size
            out = cls()
            for _ in range(count):
                h, variant, flags, opt_len = _BIN.unpack_from(data, pos)
                pos += _BIN.size
                options = bytes(data[pos : pos + opt_len])
                pos += opt_len
                (n,) = _U32.unpack_from(data, pos)
                pos += 4
                names = []
                for _ in range(n):
                    (ln,) = _U16.unpack_from(data, pos)
                    pos += 2
                    names.append(bytes(data[pos : pos + ln]).decode())
                    pos += ln
                out.binaries.append(KernelBinary(h, b"", LoadVariant(variant), options, tuple(names), flags))
            (n_refs,) = _U32.unpack_from(data, pos)
            pos += 4
            for _ in range(n_refs):
                bi, ei = _IDX.unpack_from(data, pos)
                pos += _IDX.size
                b = out.binaries[bi]
                out.entries[KernelRef(b.hash, b.entrypoints[ei])] = (bi, ei)
        except (struct.error, IndexError, UnicodeDecodeError, ValueError) as exc:
            raise ArchiveCorruptionError(f"catalog is malformed ({exc})") from None
        if pos != len(data):
            raise ArchiveCorruptionError("catalog has trailing bytes")
        return out


def prelink(segments, ctx=None) -> bytes:
    """Link relocatable segments into one ready-to-load payload (SAVE only)."""
    if ctx is not None:
        ctx.counters.bump("prelink")
        return ctx.link(segments)
    return binfmt.link(segments)


class CatalogRecorder:
    """SAVE-side interposer on module loads and device-side init."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.catalog = Catalog()
        self._by_hash = {}
        self._module_hash = {}
        self._lock = threading.Lock()

    def intercept_load(self, payload, variant=LoadVariant.DATA, options=b"", prelinked=False):
        """Load through the driver and record the payload. Returns (module, new refs)."""
        variant = LoadVariant(variant)
        raw = payload
        if variant == LoadVariant.FILE:
            with open(payload, "rb") as f:
                raw = f.read()
        raw = bytes(raw)
        module = self.ctx.load_module(payload, variant, options)
        binary = binfmt.decode(raw)
        h = content_hash(raw)
        delta = []
        with self._lock:
            self._module_hash[module] = h
            known = self._by_hash.get(h)
            if known is not None:
                if known.payload != raw:
                    raise ArchiveCorruptionError(f"content-hash collision on {hex_hash(h)}")
                return module, delta
            kb = KernelBinary(h, raw, variant, bytes(options), tuple(binary.names()))
            if prelinked:
                kb.flags |= FLAG_PRELINKED
            idx = len(self.catalog.binaries)
            self.catalog.binaries.append(kb)
            self._by_hash[h] = kb
            for j, name in enumerate(kb.entrypoints):
                ref = KernelRef(h, name)
                self.catalog.entries[ref] = (idx, j)
                delta.append(ref)
        return module, delta

    def intercept_device_init(self, module):
        """Run device-side init and flag the module's binary for LOAD."""
        self.ctx.device_init(module)
        self.mark_device_init(self._module_hash[module])

    def mark_device_init(self, h):
        self._by_hash[h].flags |= FLAG_NEEDS_INIT

    def mark(self, h, flag):
        self._by_hash[h].flags |= flag

    def binary_of(self, module) -> int:
        return self._module_hash[module]

    def prelink_and_load(self, segments, variant=LoadVariant.DATA, options=b""):
        payload = prelink(segments, self.ctx)
        return self.intercept_load(payload, variant, options, prelinked=True)


class KernelResolver:
    """LOAD-side binary restoration and (hash, name) -> kernel handle table.

    Restoring the same catalog twice is a no-op; the table is read-only
    once restoration finishes and may be shared across threads.
    """

    def __init__(self, ctx):
        self.ctx = ctx
        self.table = {}
        self.modules = {}
        self.init_calls = 0

    def restore(self, catalog: Catalog, source) -> "KernelResolver":
        for b in catalog.binaries:
            if b.hash in self.modules:
                continue
            module = self._load(b, source)
            if b.needs_device_init:
                self.ctx.device_init(module)
                self.init_calls += 1
            self.modules[b.hash] = module
        for ref in catalog.entries:
            if ref not in self.table:
                self.table[ref] = self.ctx.get_function(self.modules[ref.binary_hash], ref.name)
        return self

    def _load(self, b: KernelBinary, source):
        try:
            raw = source.read_binary(b.hash)
        except FileNotFoundError:
            raise ArchiveCorruptionError(f"archive is missing binaries/{b.filename}") from None
        if content_hash(raw) != b.hash:
            raise ArchiveCorruptionError(f"binaries/{b.filename} does not match its content hash")
        if b.variant == LoadVariant.FILE:
            return self.ctx.load_module(source.binary_path(b.hash), b.variant, b.options)
        return self.ctx.load_module(raw, b.variant, b.options)

    def __getitem__(self, ref: KernelRef) -> int:
        return self.table[ref]

    def __contains__(self, ref):
        return ref in self.table

    def resolve(self, ref: KernelRef) -> int:
        try:
            return self.table[ref]
        except KeyError:
            raise UnresolvedKernelError(f"unresolved kernel {ref}", ref=ref) from None


def restore_binaries(ctx, catalog: Catalog, source) -> KernelResolver:
    return KernelResolver(ctx).restore(catalog, source)
