"""Unified fabric address space: sections, regions, mapping tables, and the
per-node buffer daemons that carve sections into power-of-two buffer classes.

The address space is laid out device by device in id order at bootstrap.
Sections are fixed 2 MiB units; 512 consecutive sections form a region;
buffers of class c are c-aligned slices of a section whose daemon free list
is LIFO, so a freed address is the first one reused.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Optional

from .fabric import MemoryDevice

SECTION_BYTES = 2 * 1024 * 1024
REGION_SECTIONS = 512
MIN_CLASS = 256
MAX_CLASS = SECTION_BYTES

# sections' worth of free buffers a daemon may hoard per class before
# fully-free sections are handed back to the pool
FREE_SECTION_WATERMARK = 4


class PoolExhausted(Exception):
    """No free section (or buffer) satisfies the request."""


class OversizeRequest(Exception):
    """Requested buffer larger than one section."""


class DoubleFree(Exception):
    """Buffer freed twice."""


class FaultUnmapped(Exception):
    """Address not mapped (with permission) for the requesting node."""


class NotOwner(Exception):
    """Grant attempted by a node that does not own the mapping."""


def buffer_class_for(size: int) -> int:
    """Smallest power-of-two class in [256 B, 2 MiB] holding `size` bytes."""
    if size > MAX_CLASS:
        raise OversizeRequest(f"{size} B exceeds the {MAX_CLASS} B section size")
    if size < 1:
        raise ValueError("buffer size must be at least 1 byte")
    c = MIN_CLASS
    while c < size:
        c <<= 1
    return c


@dataclass(frozen=True)
class BufferRef:
    addr: int
    len: int
    class_bytes: int
    section_id: int


class Section:
    __slots__ = ("id", "base", "device_id", "dev_offset", "owner",
                 "buffer_class", "free_stack", "live")

    def __init__(self, sec_id: int, base: int, device_id: int, dev_offset: int):
        self.id = sec_id
        self.base = base
        self.device_id = device_id
        self.dev_offset = dev_offset
        self.owner = None
        self.buffer_class: Optional[int] = None
        self.free_stack: list[int] = []
        self.live = 0

    @property
    def region_id(self) -> int:
        return self.id // REGION_SECTIONS


class Region:
    __slots__ = ("id", "cacheable", "granularity")

    def __init__(self, region_id: int):
        self.id = region_id
        self.cacheable = False
        self.granularity: Optional[int] = None

    def first_section(self) -> int:
        return self.id * REGION_SECTIONS

    def last_section(self) -> int:
        return self.id * REGION_SECTIONS + REGION_SECTIONS - 1


class _DaemonClass:
    """One buffer class of one node's daemon: sections in MRU order."""

    __slots__ = ("sections", "free_count")

    def __init__(self):
        self.sections: list[Section] = []  # front = most recently touched
        self.free_count = 0


class MemoryPool:
    """Pool state for one rack: devices, FAS layout, daemons, permissions."""

    def __init__(self, devices: list[MemoryDevice], node_ids: list):
        if not devices:
            raise ValueError("memory pool needs at least one device")
        self.devices = sorted(devices, key=lambda d: d.id)
        self.sections: list[Section] = []
        self.regions: list[Region] = []
        self._free_by_device: dict[int, list[int]] = {}
        self._daemons: dict = {}
        self._live: dict[int, BufferRef] = {}
        self._granted: dict[tuple, bool] = {}
        self._granted_by_addr: dict[int, list] = {}
        self.live_bytes = 0
        self.free_bytes = 0
        self.padding_bytes = 0
        self.free_notify_cbs: list = []

        base = 0
        for dev in self.devices:
            if dev.capacity % SECTION_BYTES:
                raise ValueError(
                    f"device {dev.id} capacity must be a 2 MiB multiple"
                )
            for off in range(0, dev.capacity, SECTION_BYTES):
                sec = Section(len(self.sections), base + off, dev.id, off)
                self.sections.append(sec)
                self._free_by_device.setdefault(dev.id, []).append(sec.id)
            base += dev.capacity
        self.fas_size = base
        n_regions = (len(self.sections) + REGION_SECTIONS - 1) // REGION_SECTIONS
        self.regions = [Region(i) for i in range(n_regions)]
        for nid in node_ids:
            self.register_node(nid)

    # -- bootstrap / layout ------------------------------------------------

    def register_node(self, node_id) -> None:
        self._daemons.setdefault(node_id, {})

    def device_by_id(self, dev_id: int) -> MemoryDevice:
        for d in self.devices:
            if d.id == dev_id:
                return d
        raise KeyError(dev_id)

    def section_of(self, addr: int) -> Section:
        if not (0 <= addr < self.fas_size):
            raise FaultUnmapped(f"address {addr} outside the FAS")
        return self.sections[addr // SECTION_BYTES]

    def region_of(self, ref_or_addr) -> Region:
        addr = ref_or_addr.addr if isinstance(ref_or_addr, BufferRef) else ref_or_addr
        return self.regions[self.section_of(addr).region_id]

    def device_of(self, ref: BufferRef) -> MemoryDevice:
        return self.device_by_id(self.sections[ref.section_id].device_id)

    # -- section allocation --------------------------------------------------

    def _take_free_section(self, node_id, location_pref: str,
                           device_hint: Optional[int]) -> Section:
        candidates: list[int] = []
        order = []
        if device_hint is not None:
            order.append([device_hint])
        if location_pref == "local":
            order.append([d.id for d in self.devices if d.is_local_to(node_id)])
        elif location_pref == "fabric-attached":
            order.append([d.id for d in self.devices
                          if d.location == "fabric-attached"])
        order.append([d.id for d in self.devices])  # deterministic fallback
        for dev_ids in order:
            candidates = [self._free_by_device[d][0] for d in dev_ids
                          if self._free_by_device.get(d)]
            if candidates:
                sec_id = min(candidates)
                sec = self.sections[sec_id]
                self._free_by_device[sec.device_id].remove(sec_id)
                return sec
        raise PoolExhausted("no free section in the pool")

    def alloc_section(self, node_id, class_bytes: int,
                      location_pref: str = "any",
                      device_hint: Optional[int] = None) -> Section:
        sec = self._take_free_section(node_id, location_pref, device_hint)
        sec.owner = node_id
        sec.buffer_class = class_bytes
        count = SECTION_BYTES // class_bytes
        # stack pops from the end; build descending so low addresses go first
        sec.free_stack = [sec.base + i * class_bytes
                          for i in range(count - 1, -1, -1)]
        sec.live = 0
        self.free_bytes += SECTION_BYTES
        return sec

    def release_section(self, sec: Section) -> None:
        if sec.live:
            raise ValueError("cannot release a section with live buffers")
        sec.owner = None
        sec.buffer_class = None
        sec.free_stack = []
        self.free_bytes -= SECTION_BYTES
        bisect.insort(self._free_by_device[sec.device_id], sec.id)

    # -- buffer daemon -------------------------------------------------------

    def alloc_shared_buffer(self, node_id, size: int,
                            location_pref: str = "any",
                            device_hint: Optional[int] = None) -> BufferRef:
        class_bytes = buffer_class_for(size)
        dclass = self._daemons[node_id].setdefault(class_bytes, _DaemonClass())
        sec = None
        if device_hint is not None:
            for s in dclass.sections:
                if s.device_id == device_hint and s.free_stack:
                    sec = s
                    break
        elif dclass.sections and dclass.sections[0].free_stack:
            sec = dclass.sections[0]
        else:
            for s in dclass.sections:
                if s.free_stack:
                    sec = s
                    break
        if sec is None:
            sec = self.alloc_section(node_id, class_bytes, location_pref,
                                     device_hint)
            dclass.sections.insert(0, sec)
            dclass.free_count += SECTION_BYTES // class_bytes
        addr = sec.free_stack.pop()
        sec.live += 1
        dclass.free_count -= 1
        ref = BufferRef(addr, size, class_bytes, sec.id)
        self._live[addr] = ref
        self.live_bytes += size
        self.padding_bytes += class_bytes - size
        self.free_bytes -= class_bytes
        return ref

    def free_buffer(self, ref: BufferRef) -> None:
        if self._live.get(ref.addr) is not ref:
            raise DoubleFree(f"buffer at {ref.addr} is not live")
        del self._live[ref.addr]
        sec = self.sections[ref.section_id]
        dclass = self._daemons[sec.owner][sec.buffer_class]
        sec.free_stack.append(ref.addr)
        sec.live -= 1
        dclass.free_count += 1
        self.live_bytes -= ref.len
        self.padding_bytes -= ref.class_bytes - ref.len
        self.free_bytes += ref.class_bytes
        # LIFO reuse: the section just touched is served first
        if dclass.sections and dclass.sections[0] is not sec:
            dclass.sections.remove(sec)
            dclass.sections.insert(0, sec)
        if ref.addr in self._granted_by_addr:
            for node in self._granted_by_addr.pop(ref.addr):
                self._granted.pop((node, ref.addr), None)
        self._maybe_release_sections(dclass, sec.buffer_class)
        for cb in self.free_notify_cbs:
            cb()

    def _maybe_release_sections(self, dclass: _DaemonClass,
                                class_bytes: int) -> None:
        per_section = SECTION_BYTES // class_bytes
        watermark = FREE_SECTION_WATERMARK * per_section
        while dclass.free_count > watermark:
            victim = None
            for s in reversed(dclass.sections):  # least recently used first
                if s.live == 0:
                    victim = s
                    break
            if victim is None:
                return
            dclass.sections.remove(victim)
            dclass.free_count -= per_section
            self.release_section(victim)

    # -- translation and permissions ----------------------------------------

    def translate(self, node_id, addr: int) -> tuple[MemoryDevice, int]:
        sec = self.section_of(addr)
        if sec.owner is None:
            raise FaultUnmapped(f"address {addr} is not in any mapped section")
        if sec.owner != node_id:
            aligned = addr
            if sec.buffer_class:
                aligned = sec.base + ((addr - sec.base) // sec.buffer_class
                                      ) * sec.buffer_class
            if not self._granted.get((node_id, aligned)):
                raise FaultUnmapped(
                    f"node {node_id} has no mapping for address {addr}"
                )
        dev = self.device_by_id(sec.device_id)
        return dev, sec.dev_offset + (addr - sec.base)

    def grant(self, ref: BufferRef, frm, to) -> None:
        sec = self.sections[ref.section_id]
        if sec.owner != frm and not self._granted.get((frm, ref.addr)):
            raise NotOwner(f"node {frm} does not own buffer at {ref.addr}")
        if sec.owner == to:
            return
        if not self._granted.get((to, ref.addr)):
            self._granted[(to, ref.addr)] = True
            self._granted_by_addr.setdefault(ref.addr, []).append(to)

    # -- accounting ----------------------------------------------------------

    @property
    def live_buffers(self) -> int:
        return len(self._live)

    def live_refs(self) -> list[BufferRef]:
        return list(self._live.values())

    def owned_section_bytes(self) -> int:
        return sum(SECTION_BYTES for s in self.sections if s.owner is not None)

    def check_accounting(self) -> None:
        total = self.free_bytes + self.live_bytes + self.padding_bytes
        owned = self.owned_section_bytes()
        if total != owned:
            raise AssertionError(
                f"buddy accounting broken: free+live+padding={total} "
                f"but owned sections hold {owned}"
            )

    def layout_summary(self) -> dict:
        return {
            "fas_bytes": self.fas_size,
            "section_bytes": SECTION_BYTES,
            "section_count": len(self.sections),
            "region_sections": REGION_SECTIONS,
            "devices": [
                {"id": d.id, "capacity": d.capacity, "bandwidth": d.bandwidth,
                 "location": d.location, "cn": d.cn_id}
                for d in self.devices
            ],
            "buffer_classes": [MIN_CLASS << i
                               for i in range((MAX_CLASS // MIN_CLASS).bit_length())
                               if MIN_CLASS << i <= MAX_CLASS],
        }
