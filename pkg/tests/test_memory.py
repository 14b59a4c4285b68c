"""Allocator policies, leak accounting, and trace record/replay."""

import gc

import numpy as np
import pytest

import minml
from minml import memory
from minml.errors import AllocError, ManagerBusy, OutOfMemory, TraceError

KIB = 1024
MIB = 1 << 20


def test_bin_size_rounds_to_powers_of_two():
    assert memory.bin_size(1) == 512
    assert memory.bin_size(512) == 512
    assert memory.bin_size(513) == 1024
    assert memory.bin_size(MIB) == MIB
    assert memory.bin_size(MIB + 1) == 2 * MIB


def test_round_up_granularity():
    assert memory.round_up(1) == 512
    assert memory.round_up(512) == 512
    assert memory.round_up(513) == 1024
    assert memory.round_up(70_000) == 70_144


def test_native_grants_exact_and_counts():
    m = memory.NativeManager()
    a = m.alloc(1000, op="t")
    assert a.granted_bytes == 1000
    assert a.requested_bytes == 1000
    assert a.internal_fragmentation == 0
    m.free(a)
    s = m.stats()
    assert s.alloc_count == 1 and s.free_count == 1
    assert s.live_bytes_requested == 0 and s.live_bytes_granted == 0


def test_double_free_detected():
    m = memory.NativeManager()
    b = m.alloc(64)
    m.free(b)
    with pytest.raises(AllocError):
        m.free(b)
    with pytest.raises(AllocError):
        m.free(12345)


def test_caching_reuses_released_blocks():
    m = memory.CachingManager()
    a = m.alloc(1000)
    assert a.granted_bytes == 1024
    assert a.internal_fragmentation == 24
    m.free(a)
    assert m.stats().cache_bytes == 1024
    b = m.alloc(900)
    assert b.granted_bytes == 1024
    assert m.stats().alloc_count == 1     # served from cache, not the system
    assert m.stats().cache_bytes == 0
    m.free(b)


def test_split_restricted_carves_cached_blocks():
    m = memory.SplitRestrictedManager(threshold=MIB)
    big = m.alloc(512 * KIB)
    m.free(big)
    small = m.alloc(100 * KIB)
    # warm: granted is the 512-byte roundup, not the power-of-two bin
    assert small.granted_bytes == memory.round_up(100 * KIB)
    assert m.stats().cache_bytes == 512 * KIB - small.granted_bytes
    m.free(small)


def test_split_leftover_below_floor_is_absorbed():
    m = memory.SplitRestrictedManager(threshold=MIB)
    a = m.alloc(1024)
    m.free(a)
    b = m.alloc(700)   # leftover 1024-768 = 256 < floor, grant keeps it
    assert b.granted_bytes == 1024
    assert m.stats().cache_bytes == 0
    m.free(b)


def test_split_respects_threshold():
    m = memory.SplitRestrictedManager(threshold=MIB)
    big = m.alloc(2 * MIB)
    m.free(big)
    small = m.alloc(100 * KIB)
    # the cached 2 MiB block is above the threshold, must not be split
    assert small.granted_bytes == memory.bin_size(100 * KIB)
    assert m.stats().cache_bytes == memory.bin_size(2 * MIB)
    m.free(small)


def test_cold_split_equals_caching():
    for policy in ("caching", "split_restricted"):
        m = memory.make_manager(policy)
        b = m.alloc(900_000)
        assert b.granted_bytes == memory.bin_size(900_000)
        m.free(b)


def test_capacity_enforced():
    m = memory.CachingManager(capacity=4096)
    a = m.alloc(2048)
    with pytest.raises(OutOfMemory):
        m.alloc(4096)
    m.free(a)


def test_make_manager_names():
    assert isinstance(memory.make_manager("native"), memory.NativeManager)
    assert isinstance(memory.make_manager("caching"), memory.CachingManager)
    assert isinstance(memory.make_manager("split"), memory.SplitRestrictedManager)
    assert isinstance(memory.make_manager("split_restricted", threshold=2 * MIB),
                      memory.SplitRestrictedManager)
    with pytest.raises(ValueError):
        memory.make_manager("arena")


def test_recording_manager_trace_lines():
    rec = memory.RecordingManager(memory.NativeManager())
    a = rec.alloc(640, op="widget")
    b = rec.alloc(64)
    rec.free(a)
    rec.free(b)
    lines = list(rec.lines)
    assert lines[0].split() == ["A", "1", "640", "widget"]
    assert lines[1].split()[:3] == ["A", "2", "64"]
    assert lines[2].split() == ["F", "1"]
    assert lines[3].split() == ["F", "2"]


def test_parse_trace_rejects_garbage():
    with pytest.raises(TraceError):
        memory.parse_trace(["A 1 not_a_size op"])
    with pytest.raises(TraceError):
        memory.parse_trace(["X 1 64"])
    with pytest.raises(TraceError):
        memory.parse_trace(["F 7"])          # free of a block never allocated
    with pytest.raises(TraceError):
        memory.parse_trace(["A 1 64 op", "A 1 64 op"])   # id reuse while live


def test_replay_hand_checked_trace():
    trace = [
        "A 1 1000 conv",    # granted 1024, frag 24
        "A 2 600 bias",     # granted 1024, frag 424
        "F 1",
        "A 3 900 act",      # reuses block 1's bin: frag 124, peak 424+124
        "F 2",
        "F 3",
    ]
    res = memory.replay(trace, "caching")
    assert res.peak_internal_fragmentation == 548
    assert res.stats.alloc_count == 2          # block 3 came from cache
    assert res.stats.free_count == 0           # cache retains both bins
    assert len(res.timeline) == 6
    live_req = [row[1] for row in res.timeline]
    assert live_req == [1000, 1600, 600, 1500, 900, 0]


def test_replay_empty_trace_is_zero():
    res = memory.replay([], "caching")
    assert res.peak_internal_fragmentation == 0
    assert res.timeline == []
    assert res.stats.alloc_count == 0


def test_bundled_trace_matches_generator():
    lines = memory.load_bundled_trace()
    assert lines == memory.make_synthetic_trace()
    head = lines[0].split()
    assert head[0] == "A" and head[2].isdigit()


def test_attach_detach_manager_and_busy():
    be = minml.EagerBackend(name="memory-test-be")
    minml.registry.register(be)
    try:
        m = memory.CachingManager()
        be.attach_manager(m)
        t = minml.tensor(np.ones(1000, dtype=np.float32), backend=be.name)
        y = t.mul(2.0)
        assert m.stats().live_bytes_requested > 0
        with pytest.raises(ManagerBusy):
            be.detach_manager()
        del t, y
        gc.collect()
        s = m.stats()
        assert s.live_bytes_requested == 0
        assert s.alloc_count >= 1
        be.detach_manager()
    finally:
        minml.registry.unregister(be.name)


def test_tensor_lifetime_returns_blocks():
    be = minml.EagerBackend(name="memory-test-leak")
    minml.registry.register(be)
    rec = memory.RecordingManager(memory.NativeManager())
    be.attach_manager(rec)
    try:
        x = minml.tensor(np.ones((64, 64), dtype=np.float32), backend=be.name)
        y = minml.matmul(x, x).relu().sum()
        assert y.scalar() > 0
        del x, y
        gc.collect()
        allocs = sum(1 for l in rec.lines if l.startswith("A"))
        frees = sum(1 for l in rec.lines if l.startswith("F"))
        assert allocs > 0 and allocs == frees
        be.detach_manager()
    finally:
        minml.registry.unregister(be.name)


def test_failed_kernel_releases_its_block():
    be = minml.EagerBackend(name="memory-test-err")
    minml.registry.register(be)
    m = memory.CachingManager()
    be.attach_manager(m)
    try:
        t = minml.tensor(np.array([1.0, -1.0], dtype=np.float32), backend=be.name)
        with pytest.raises(minml.Error):
            t.astype("nonsense")
        del t
        gc.collect()
        assert m.stats().live_bytes_requested == 0
        be.detach_manager()
    finally:
        minml.registry.unregister(be.name)
