"""The simulated device-binary format ("FNDB").

Layout, all integers little-endian::

    magic "FNDB" | version u16 | kind u8 | flags u8
    link tag: u16 length + utf-8
    entrypoint count u32, then per entrypoint:
        name: u16 length + utf-8
        argument buffer size u32
        hidden-offset count u16, offsets u32 each
        function attributes: 6 x i32
    code: u32 length + opaque bytes

Hidden offsets are the byte positions inside a kernel's argument buffer
that the device dereferences at launch. Only the simulated driver reads
them; the materialization layers treat payloads as opaque bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from foundry.errors import BinaryFormatError
from foundry.graph import FuncAttrs

MAGIC = b"FNDB"
VERSION = 1

KIND_LOADABLE = 0
KIND_RELOCATABLE = 1

FLAG_NEEDS_DEVICE_INIT = 0x01

_HEAD = struct.Struct("<4sHBB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_FATTRS = struct.Struct("<6i")


@dataclass(frozen=True)
class KernelEntry:
    name: str
    arg_size: int
    hidden_offsets: tuple = ()
    func_attrs: FuncAttrs = FuncAttrs()

    def __post_init__(self):
        for off in self.hidden_offsets:
            if off < 0 or off + 8 > self.arg_size:
                raise BinaryFormatError(
                    f"kernel {self.name}: hidden offset {off} does not fit a {self.arg_size}-byte buffer"
                )


@dataclass(frozen=True)
class SimBinary:
    entries: tuple
    code: bytes = b""
    kind: int = KIND_LOADABLE
    flags: int = 0
    link_tag: str = ""

    @property
    def needs_device_init(self):
        return bool(self.flags & FLAG_NEEDS_DEVICE_INIT)

    def names(self):
        return [e.name for e in self.entries]


def _put_str(out: bytearray, s: str) -> None:
    raw = s.encode()
    out += _U16.pack(len(raw))
    out += raw


def encode(binary: SimBinary) -> bytes:
    out = bytearray(_HEAD.pack(MAGIC, VERSION, binary.kind, binary.flags))
    _put_str(out, binary.link_tag)
    out += _U32.pack(len(binary.entries))
    for e in binary.entries:
        _put_str(out, e.name)
        out += _U32.pack(e.arg_size)
        out += _U16.pack(len(e.hidden_offsets))
        for off in e.hidden_offsets:
            out += _U32.pack(off)
        out += _FATTRS.pack(*e.func_attrs.as_tuple())
    out += _U32.pack(len(binary.code))
    out += binary.code
    return bytes(out)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, st: struct.Struct):
        if self.pos + st.size > len(self.data):
            raise BinaryFormatError(f"truncated payload at byte {self.pos}")
        vals = st.unpack_from(self.data, self.pos)
        self.pos += st.size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise BinaryFormatError(f"truncated payload at byte {self.pos}")
        b = bytes(self.data[self.pos : self.pos + n])
        self.pos += n
        return b

    def string(self):
        (n,) = self.take(_U16)
        try:
            return self.raw(n).decode()
        except UnicodeDecodeError as exc:
            raise BinaryFormatError(f"bad string at byte {self.pos}") from exc


def decode(payload) -> SimBinary:
    r = _Reader(payload)
    magic, version, kind, flags = r.take(_HEAD)
    if magic != MAGIC:
        raise BinaryFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BinaryFormatError(f"unsupported binary version {version}")
    if kind not in (KIND_LOADABLE, KIND_RELOCATABLE):
        raise BinaryFormatError(f"unknown binary kind {kind}")
    tag = r.string()
    (count,) = r.take(_U32)
    entries = []
    for _ in range(count):
        name = r.string()
        (arg_size,) = r.take(_U32)
        (n_off,) = r.take(_U16)
        offsets = tuple(r.take(_U32)[0] for _ in range(n_off))
        fattrs = FuncAttrs(*r.take(_FATTRS))
        entries.append(KernelEntry(name, arg_size, offsets, fattrs))
    (code_len,) = r.take(_U32)
    code = r.raw(code_len)
    if r.pos != len(r.data):
        raise BinaryFormatError(f"{len(r.data) - r.pos} trailing bytes after payload")
    return SimBinary(tuple(entries), code, kind, flags, tag)


def link(segments) -> bytes:
    """Link relocatable segments into one loadable payload."""
    if not segments:
        raise BinaryFormatError("nothing to link")
    parts = [decode(s) for s in segments]
    tags = {p.link_tag for p in parts}
    if len(tags) != 1:
        raise BinaryFormatError(f"segments carry different link tags: {sorted(tags)}")
    entries, seen = [], set()
    for p in parts:
        for e in p.entries:
            if e.name in seen:
                raise BinaryFormatError(f"duplicate entrypoint {e.name} across segments")
            seen.add(e.name)
            entries.append(e)
    flags = 0
    for p in parts:
        flags |= p.flags
    code = b"".join(p.code for p in parts)
    return encode(SimBinary(tuple(entries), code, KIND_LOADABLE, flags, tags.pop()))
