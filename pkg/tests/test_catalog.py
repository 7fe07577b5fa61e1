import pytest

from foundry import binfmt
from foundry.catalog import (
    FLAG_NEEDS_INIT,
    FLAG_PRELINKED,
    Catalog,
    CatalogRecorder,
    KernelBinary,
    KernelResolver,
)
from foundry.driver import DeviceContext, LoadVariant
from foundry.errors import ArchiveCorruptionError, FormatVersionError, UnresolvedKernelError
from foundry.graph import FuncAttrs, KernelRef
from foundry.hashing import content_hash


def _payload(names=("gemm", "norm"), flags=0, kind=binfmt.KIND_LOADABLE, tag="", code=b"code"):
    entries = tuple(binfmt.KernelEntry(n, 32, (0,), FuncAttrs()) for n in names)
    return binfmt.encode(binfmt.SimBinary(entries, code, kind, flags, tag))


class DictSource:
    """In-memory stand-in for an archive's binaries directory."""

    def __init__(self, catalog, tmp_path=None):
        self.blobs = {b.hash: b.payload for b in catalog.binaries}
        self.tmp_path = tmp_path
        self.reads = 0

    def read_binary(self, h):
        self.reads += 1
        if h not in self.blobs:
            raise FileNotFoundError(h)
        return self.blobs[h]

    def binary_path(self, h):
        path = self.tmp_path / f"{h:016x}.bin"
        path.write_bytes(self.blobs[h])
        return path


def _record(tmp_path):
    ctx = DeviceContext()
    rec = CatalogRecorder(ctx)
    plain = _payload()
    init = _payload(("comm",), binfmt.FLAG_NEEDS_DEVICE_INIT, code=b"comm")
    file_path = tmp_path / "lib.bin"
    file_path.write_bytes(_payload(("scan",), code=b"file"))
    m1, delta1 = rec.intercept_load(plain)
    _, delta2 = rec.intercept_load(plain, LoadVariant.WITH_OPTIONS, b"-O3")
    m3, _ = rec.intercept_load(init)
    rec.intercept_device_init(m3)
    rec.intercept_load(file_path, LoadVariant.FILE)
    segs = [_payload((n,), kind=binfmt.KIND_RELOCATABLE, tag="fused", code=n.encode()) for n in ("add", "mul")]
    rec.prelink_and_load(segs)
    return ctx, rec, (m1, delta1, delta2)


def test_recorder_deduplicates_by_content(tmp_path):
    ctx, rec, (m1, delta1, delta2) = _record(tmp_path)
    assert [r.name for r in delta1] == ["gemm", "norm"] and delta2 == []
    assert len(rec.catalog.binaries) == 4
    assert rec.binary_of(m1) == content_hash(_payload())
    assert rec.catalog.binaries[1].needs_device_init
    assert rec.catalog.binaries[2].variant == LoadVariant.FILE
    assert rec.catalog.binaries[3].flags & FLAG_PRELINKED
    assert rec.catalog.binaries[3].entrypoints == ("add", "mul")
    assert ctx.counters["prelink"] == 1


def test_catalog_index_round_trip(tmp_path):
    _, rec, _ = _record(tmp_path)
    cat = rec.catalog
    back = Catalog.from_bytes(cat.to_bytes())
    assert back.entries == cat.entries
    assert [(b.hash, b.variant, b.options, b.entrypoints, b.flags) for b in back.binaries] == [
        (b.hash, b.variant, b.options, b.entrypoints, b.flags) for b in cat.binaries
    ]
    data = cat.to_bytes()
    with pytest.raises(ArchiveCorruptionError):
        Catalog.from_bytes(data[:-3])
    with pytest.raises(ArchiveCorruptionError):
        Catalog.from_bytes(b"ZZZZ" + data[4:])
    with pytest.raises(FormatVersionError):
        Catalog.from_bytes(data[:4] + b"\x07\x00" + data[6:])
    with pytest.raises(FormatVersionError):
        Catalog.from_bytes(data[:6] + b"\x09" + data[7:])


def test_pruned_keeps_only_referenced_binaries(tmp_path):
    _, rec, _ = _record(tmp_path)
    h = content_hash(_payload())
    pruned = rec.catalog.pruned([KernelRef(h, "norm")])
    assert pruned.hashes() == [h]
    assert pruned.entries == {KernelRef(h, "norm"): (0, 1)}
    with pytest.raises(UnresolvedKernelError):
        rec.catalog.pruned([KernelRef(h, "missing")])
    with pytest.raises(UnresolvedKernelError):
        rec.catalog.pruned([KernelRef(12345, "gemm")])


def test_resolver_restores_flags_and_is_idempotent(tmp_path):
    _, rec, _ = _record(tmp_path)
    cat = rec.catalog
    ctx = DeviceContext()
    src = DictSource(cat, tmp_path)
    resolver = KernelResolver(ctx).restore(cat, src)
    assert ctx.counters["module"] == 4
    assert ctx.counters["device_init"] == resolver.init_calls == 1
    for ref in cat.entries:
        assert ctx.kernel(resolver.resolve(ref)).ref == ref
    resolver.restore(cat, src)
    assert ctx.counters["module"] == 4 and src.reads == 4
    with pytest.raises(UnresolvedKernelError):
        resolver.resolve(KernelRef(1, "nope"))


def test_resolver_reports_missing_or_altered_binaries(tmp_path):
    _, rec, _ = _record(tmp_path)
    cat = rec.catalog
    src = DictSource(cat, tmp_path)
    victim = cat.binaries[0].hash
    del src.blobs[victim]
    with pytest.raises(ArchiveCorruptionError, match="missing"):
        KernelResolver(DeviceContext()).restore(cat, src)
    src.blobs[victim] = _payload(code=b"tampered")
    with pytest.raises(ArchiveCorruptionError, match="content hash"):
        KernelResolver(DeviceContext()).restore(cat, src)


def test_init_flag_is_only_set_by_intercepted_init(tmp_path):
    _, rec, _ = _record(tmp_path)
    flagged = [b for b in rec.catalog.binaries if b.flags & FLAG_NEEDS_INIT]
    assert [b.entrypoints for b in flagged] == [("comm",)]


def test_fixture_binary_hash_resolves_its_gemm():
    # The fixture hash is modeled as a catalog key; no simulated payload hashes to it.
    h = 6788486540864509700
    name = "nvjet_tst_168x128_64x5_1x2_h_bz_TNN"
    cat = Catalog([KernelBinary(h, b"", LoadVariant.DATA, b"", ("other", name))], {KernelRef(h, name): (0, 1)})
    assert cat.lookup(KernelRef(h, name)) == (0, 1)
    back = Catalog.from_bytes(cat.to_bytes())
    assert back.covers(KernelRef(h, name)) and not back.covers(KernelRef(h, "other"))
    with pytest.raises(UnresolvedKernelError):
        cat.lookup(KernelRef(h + 1, name))
