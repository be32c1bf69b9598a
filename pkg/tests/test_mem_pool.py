import random

import pytest

from dfabricsim.fabric import MemoryDevice
from dfabricsim.mem_pool import (
    SECTION_BYTES,
    DoubleFree,
    FaultUnmapped,
    MemoryPool,
    NotOwner,
    OversizeRequest,
    PoolExhausted,
    buffer_class_for,
)

GIB = 1024 * 1024 * 1024
GB = 10 ** 9


def make_pool(capacities=(16 * GIB, 16 * GIB, 16 * GIB), nodes=(0, 1, -1)):
    devices = []
    for i, cap in enumerate(capacities):
        if i < 2 and len(capacities) >= 3:
            devices.append(MemoryDevice(i, cap, 4 * GB, "cn-local", cn_id=i))
        else:
            devices.append(MemoryDevice(i, cap, 4 * GB, "fabric-attached"))
    return MemoryPool(devices, list(nodes))


def test_bootstrap_layout_three_devices():
    pool = make_pool()
    assert pool.fas_size == 48 * GIB
    # device 1 starts at offset 16 GiB
    sec = pool.section_of(16 * GIB)
    assert sec.device_id == 1
    assert sec.dev_offset == 0
    assert pool.section_of(16 * GIB - 1).device_id == 0


def test_bootstrap_single_device_identity():
    pool = make_pool(capacities=(4 * SECTION_BYTES,), nodes=(0,))
    assert pool.fas_size == 4 * SECTION_BYTES
    assert pool.section_of(SECTION_BYTES).dev_offset == SECTION_BYTES


def test_bootstrap_requires_devices():
    with pytest.raises(ValueError):
        MemoryPool([], [0])


def test_buffer_class_ladder():
    assert buffer_class_for(1) == 256
    assert buffer_class_for(1500) == 2048
    assert buffer_class_for(4096) == 4096
    assert buffer_class_for(2 * 1024 * 1024) == 2 * 1024 * 1024
    with pytest.raises(OversizeRequest):
        buffer_class_for(3 * 1024 * 1024)


def test_alloc_section_prefers_local_then_falls_back():
    pool = make_pool()
    sec = pool.alloc_section(1, 4096, "local")
    assert pool.devices[sec.device_id].is_local_to(1)
    # exhaust CN 0's local device, then preference falls back to lowest id
    small = make_pool(capacities=(SECTION_BYTES, SECTION_BYTES, SECTION_BYTES))
    s1 = small.alloc_section(0, 4096, "local")
    assert s1.device_id == 0
    s2 = small.alloc_section(0, 4096, "local")
    assert s2.device_id == 1  # lowest-id free section anywhere


def test_alloc_section_pool_exhausted():
    pool = make_pool(capacities=(SECTION_BYTES,), nodes=(0,))
    pool.alloc_section(0, 4096)
    with pytest.raises(PoolExhausted):
        pool.alloc_section(0, 4096)


def test_512_allocations_of_4k_consume_one_section():
    pool = make_pool()
    for _ in range(SECTION_BYTES // 4096):
        pool.alloc_shared_buffer(0, 4096)
    assert pool.owned_section_bytes() == SECTION_BYTES
    pool.alloc_shared_buffer(0, 4096)
    assert pool.owned_section_bytes() == 2 * SECTION_BYTES


def test_lifo_reuse_of_freed_address():
    pool = make_pool()
    a = pool.alloc_shared_buffer(0, 1500)
    pool.alloc_shared_buffer(0, 1500)
    pool.free_buffer(a)
    c = pool.alloc_shared_buffer(0, 1500)
    assert c.addr == a.addr


def test_double_free_rejected():
    pool = make_pool()
    ref = pool.alloc_shared_buffer(0, 4096)
    pool.free_buffer(ref)
    with pytest.raises(DoubleFree):
        pool.free_buffer(ref)


def test_watermark_returns_fully_free_sections():
    pool = make_pool()
    per_sec = SECTION_BYTES // 4096
    refs = [pool.alloc_shared_buffer(0, 4096) for _ in range(6 * per_sec)]
    assert pool.owned_section_bytes() == 6 * SECTION_BYTES
    for r in refs:
        pool.free_buffer(r)
    # watermark is 4 sections worth of free buffers per class
    assert pool.owned_section_bytes() == 4 * SECTION_BYTES
    pool.check_accounting()


def test_translate_owner_and_faults():
    pool = make_pool()
    ref = pool.alloc_shared_buffer(0, 4096)
    dev, off = pool.translate(0, ref.addr)
    sec = pool.sections[ref.section_id]
    assert dev.id == sec.device_id
    assert off == sec.dev_offset + (ref.addr - sec.base)
    with pytest.raises(FaultUnmapped):
        pool.translate(1, ref.addr)  # other node, never granted
    with pytest.raises(FaultUnmapped):
        pool.translate(0, pool.fas_size)  # out of bounds
    with pytest.raises(FaultUnmapped):
        pool.translate(0, pool.fas_size - 1)  # unallocated section


def test_grant_then_translate_then_free_by_grantee():
    pool = make_pool()
    ref = pool.alloc_shared_buffer(0, 4096)
    with pytest.raises(NotOwner):
        pool.grant(ref, 1, 0)
    pool.grant(ref, 0, 1)
    dev, _ = pool.translate(1, ref.addr)
    assert dev is not None
    # grantee frees; the original owner's daemon reclaims
    pool.free_buffer(ref)
    again = pool.alloc_shared_buffer(0, 4096)
    assert again.addr == ref.addr
    with pytest.raises(FaultUnmapped):
        pool.translate(1, again.addr)  # grant died with the free


def test_no_two_live_buffers_overlap_random_ops():
    pool = make_pool(capacities=(8 * SECTION_BYTES,), nodes=(0,))
    rng = random.Random(7)
    live = {}
    intervals = []  # brute-force oracle
    for _ in range(100_000):
        if live and (rng.random() < 0.55 or len(live) > 4000):
            addr = rng.choice(list(live))
            ref = live.pop(addr)
            intervals.remove((ref.addr, ref.addr + ref.len))
            pool.free_buffer(ref)
        else:
            size = rng.choice([64, 256, 1500, 4096, 9000])
            try:
                ref = pool.alloc_shared_buffer(0, size)
            except PoolExhausted:
                continue
            for lo, hi in intervals:
                assert ref.addr + ref.len <= lo or ref.addr >= hi, "overlap"
            intervals.append((ref.addr, ref.addr + ref.len))
            live[ref.addr] = ref
    pool.check_accounting()


def test_capacity_conservation():
    pool = make_pool()
    assert len(pool.sections) * SECTION_BYTES == sum(
        d.capacity for d in pool.devices
    )


def test_accounting_identity_maintained():
    pool = make_pool()
    rng = random.Random(3)
    refs = []
    for _ in range(2000):
        if refs and rng.random() < 0.5:
            pool.free_buffer(refs.pop(rng.randrange(len(refs))))
        else:
            refs.append(pool.alloc_shared_buffer(0, rng.choice([100, 2048, 4000])))
        pool.check_accounting()


def test_device_hint_places_buffer():
    pool = make_pool()
    ref = pool.alloc_shared_buffer(-1, 4096, "fabric-attached", device_hint=2)
    assert pool.sections[ref.section_id].device_id == 2
