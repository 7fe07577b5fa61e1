import pytest
from hypothesis import given
from hypothesis import strategies as st

from foundry.alloc import (
    BASE_ENV,
    DEFAULT_BASE,
    AllocationRecord,
    MemoryEventLog,
    Phase,
    RegionConfig,
    Window,
    reserve,
    round_up,
)
from foundry.driver import DeviceContext
from foundry.errors import AllocationError, ArchiveCorruptionError, LayoutDivergenceError, OutOfRegionError

G = 64 << 10
SMALL = RegionConfig(DEFAULT_BASE, 64 * G, G)

sizes = st.lists(st.integers(1, 3 * G), min_size=1, max_size=20)


def _addresses(seq, config=SMALL):
    region = reserve(DeviceContext(), config)
    return [region.allocate(s) for s in seq]


def test_first_allocations_are_contiguous_granules():
    assert _addresses([1, G, G + 1, 5]) == [DEFAULT_BASE, DEFAULT_BASE + G, DEFAULT_BASE + 2 * G, DEFAULT_BASE + 4 * G]


@given(sizes)
def test_addresses_follow_the_prefix_sum_of_rounded_sizes(seq):
    expected, off = [], 0
    for s in seq:
        expected.append(DEFAULT_BASE + off)
        off += -(-s // G) * G
    if off > SMALL.capacity:
        with pytest.raises(OutOfRegionError):
            _addresses(seq)
    else:
        assert _addresses(seq) == expected
        assert _addresses(seq) == expected


def test_free_unmaps_but_never_rewinds():
    ctx = DeviceContext()
    region = reserve(ctx, SMALL)
    a = region.allocate(100)
    region.free(a)
    assert not ctx.is_mapped(a)
    assert region.allocate(100) == a + G
    with pytest.raises(AllocationError):
        region.free(a)


def test_out_of_region():
    region = reserve(DeviceContext(), SMALL)
    region.allocate(63 * G)
    with pytest.raises(OutOfRegionError):
        region.allocate(2 * G)


def test_env_overrides_base(monkeypatch):
    monkeypatch.setenv(BASE_ENV, "0x600000000000")
    assert RegionConfig.from_env().base == 0x600000000000
    monkeypatch.delenv(BASE_ENV)
    assert RegionConfig.from_env().base == DEFAULT_BASE


@pytest.mark.parametrize(
    "config",
    [RegionConfig(DEFAULT_BASE + 1, 64 * G, G), RegionConfig(DEFAULT_BASE, 64 * G + 1, G), RegionConfig(DEFAULT_BASE, 64 * G, 3000)],
)
def test_reserve_validates_config(config):
    with pytest.raises(AllocationError):
        reserve(DeviceContext(), config)


def _save_sequence(pre, window):
    ctx = DeviceContext()
    region = reserve(ctx, SMALL, Phase.SAVE)
    for s in pre:
        region.allocate(s)
    region.record_capture_window()
    addrs = [region.allocate(s) for s in window]
    return region, region.end_capture_window(), addrs


def test_capture_window_log_records_only_window_allocations():
    region, log, addrs = _save_sequence([G, 2 * G], [100, 3 * G])
    assert [r.window for r in region.records] == [Window.PRE_CAPTURE] * 2 + [Window.CAPTURE] * 2
    assert [r.address for r in log.records] == addrs
    assert (log.start_offset, log.final_offset) == (3 * G, 7 * G)


@given(st.lists(st.integers(1, 2 * G), max_size=5), st.lists(st.integers(1, 2 * G), max_size=5))
def test_window_replay_reproduces_addresses(pre, window):
    saved, log, addrs = _save_sequence(pre, window)
    for prealloc in (False, True):
        ctx = DeviceContext()
        region = reserve(ctx, SMALL, Phase.LOAD)
        if prealloc:
            region.preallocate(saved.offset)
        for s in pre:
            region.allocate(s)
        region.replay_capture_window(MemoryEventLog.from_bytes(log.to_bytes()))
        assert [r.address for r in region.records[len(pre):]] == addrs
        assert region.offset == saved.offset


def test_window_replay_detects_extra_prewindow_allocation():
    _, log, _ = _save_sequence([G], [G])
    region = reserve(DeviceContext(), SMALL, Phase.LOAD)
    region.allocate(G)
    region.allocate(1)
    with pytest.raises(LayoutDivergenceError):
        region.replay_capture_window(log)


def test_window_replay_detects_size_mismatch():
    _, log, _ = _save_sequence([G], [G, G])
    log.records[0] = AllocationRecord(0, 2 * G, log.records[0].address, 2 * G, Window.CAPTURE)
    region = reserve(DeviceContext(), SMALL, Phase.LOAD)
    region.allocate(G)
    with pytest.raises(LayoutDivergenceError):
        region.replay_capture_window(log)


def test_preallocation_is_one_map_call_and_transparent():
    seq = [G, 100, 5 * G, 7]
    final = sum(round_up(s, G) for s in seq)
    plain_ctx, pre_ctx = DeviceContext(), DeviceContext()
    plain, pre = reserve(plain_ctx, SMALL), reserve(pre_ctx, SMALL)
    pre.preallocate(final)
    assert pre_ctx.counters["alloc"] == 2
    assert [plain.allocate(s) for s in seq] == [pre.allocate(s) for s in seq]
    assert pre_ctx.counters["alloc"] == 2
    assert plain_ctx.counters["alloc"] == 1 + len(seq)
    with pytest.raises(OutOfRegionError):
        pre.allocate(1)


def test_preallocate_must_come_first():
    region = reserve(DeviceContext(), SMALL)
    region.allocate(1)
    with pytest.raises(AllocationError):
        region.preallocate(2 * G)


def test_event_log_rejects_truncation():
    _, log, _ = _save_sequence([], [1, 2])
    data = log.to_bytes()
    with pytest.raises(ArchiveCorruptionError):
        MemoryEventLog.from_bytes(data[:-1])
    with pytest.raises(ArchiveCorruptionError):
        MemoryEventLog.from_bytes(data[:10])
