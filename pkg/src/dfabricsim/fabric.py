"""Fabric timing models: windowed cacheline load/store, pipelined bulk DMA,
and serialised Ethernet links.

Two access modes are modelled for the memory side:

* ``CxlPort.loadstore`` -- synchronous cacheline traffic limited by the
  number of outstanding accesses a node may keep in flight.  Completion is
  ``rounds * RTT`` with ``rounds = ceil(lines / window)``, further stretched
  when the target device (or the node's fabric link) is bandwidth-saturated.
* ``FluidNet.start`` -- pipelined DMA-style transfers that share every
  resource on their path equally with other in-flight transfers.

Ethernet links serialise frames FIFO at line rate and add propagation delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .sim_core import Completion, Engine, EventKind

LINE_BYTES = 64
WINDOW_CEILING = 64


class UnreachableDevice(Exception):
    """Requester has no fabric path to the target device."""


class OversizeFrame(Exception):
    """Frame exceeds the link MTU."""


@dataclass(frozen=True)
class LinkSpec:
    bandwidth: int  # bytes/second
    propagation: int  # ns
    kind: str = "cxl-link"

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("link bandwidth must be positive")
        if self.propagation < 0:
            raise ValueError("propagation cannot be negative")


@dataclass(frozen=True)
class SwitchHop:
    per_hop_latency: int = 70

    def __post_init__(self):
        if self.per_hop_latency < 0:
            raise ValueError("hop latency cannot be negative")


@dataclass(frozen=True)
class AccessWindow:
    max_outstanding: int = 8
    line_size: int = LINE_BYTES

    def __post_init__(self):
        if not (1 <= self.max_outstanding <= WINDOW_CEILING):
            raise ValueError(
                f"window must be in [1, {WINDOW_CEILING}], got {self.max_outstanding}"
            )


@dataclass(frozen=True)
class LatencyProfile:
    local_base: int = 650
    remote_base: int = 6500


class BandwidthShare:
    """A fluid-shared capacity: each of n active transfers gets capacity/n."""

    __slots__ = ("name", "capacity", "transfers")

    def __init__(self, name: str, capacity: int):
        if capacity <= 0:
            raise ValueError(f"capacity of {name} must be positive")
        self.name = name
        self.capacity = capacity  # bytes/second
        # insertion-ordered for deterministic iteration
        self.transfers: dict = {}

    @property
    def active(self) -> int:
        return len(self.transfers)

    def __repr__(self):
        return f"BandwidthShare({self.name}, {self.capacity} B/s, n={self.active})"


class MemoryDevice:
    """A pool memory device behind a full-duplex fabric port: one bandwidth
    share per direction (share_in: writes into the device, share_out: reads)."""

    def __init__(self, dev_id: int, capacity: int, bandwidth: int,
                 location: str, cn_id: Optional[int] = None):
        if capacity <= 0:
            raise ValueError("device capacity must be positive")
        if location not in ("cn-local", "fabric-attached"):
            raise ValueError(f"bad device location {location!r}")
        if location == "cn-local" and cn_id is None:
            raise ValueError("cn-local device needs a cn_id")
        self.id = dev_id
        self.capacity = capacity
        self.location = location
        self.cn_id = cn_id
        self.write_share = BandwidthShare(f"dev{dev_id}-wr", bandwidth)
        self.read_share = BandwidthShare(f"dev{dev_id}-rd", bandwidth)

    @property
    def bandwidth(self) -> int:
        return self.read_share.capacity

    def is_local_to(self, cn_id) -> bool:
        return self.location == "cn-local" and self.cn_id == cn_id


class _Transfer:
    __slots__ = ("remaining", "resources", "cap", "rate", "last_t", "gen",
                 "done", "min_end", "running", "next_eta")

    def __init__(self, nbytes, resources, cap, done, min_end):
        self.remaining = float(nbytes)
        self.resources = tuple(resources)
        self.cap = cap
        self.rate = 0.0
        self.last_t = 0
        self.gen = 0
        self.done = done
        self.min_end = min_end
        self.running = False
        self.next_eta = None


class FluidNet:
    """Processor-sharing bandwidth model.

    Every in-flight transfer proceeds at min over its resources of
    capacity/active (optionally clamped by a per-transfer cap).  Rates are
    recomputed for the transfers sharing a resource whenever membership on
    that resource changes; completions carry a generation tag so stale
    wake-ups are ignored.
    """

    EPSILON = 1e-6  # bytes considered fully drained

    def __init__(self, engine: Engine):
        self._engine = engine

    def start(self, nbytes: int, resources: Sequence[BandwidthShare],
              cap_bps: Optional[float] = None, startup_ns: int = 0,
              min_end: Optional[int] = None,
              kind: EventKind = EventKind.DMA_COMPLETE) -> Completion:
        done = Completion(self._engine)
        tr = _Transfer(nbytes, resources, cap_bps, done, min_end)
        if startup_ns:
            self._engine.after(startup_ns, kind, lambda: self._begin(tr))
        else:
            self._begin(tr)
        return done

    def _rate_of(self, tr: _Transfer) -> float:
        rate = math.inf if tr.cap is None else tr.cap
        for r in tr.resources:
            share = r.capacity / len(r.transfers)
            if share < rate:
                rate = share
        if rate is math.inf:
            raise UnreachableDevice("transfer with no resources needs a cap")
        return rate

    def _begin(self, tr: _Transfer) -> None:
        if tr.remaining <= self.EPSILON:
            self._fire(tr)
            return
        tr.running = True
        tr.last_t = self._engine.now
        for r in tr.resources:
            r.transfers[tr] = None
        self._reshare(tr.resources)

    def _schedule_eta(self, tr: _Transfer, eta: int) -> None:
        tr.gen += 1
        tr.next_eta = eta
        self._engine.schedule(
            eta, EventKind.DMA_COMPLETE,
            lambda t=tr, g=tr.gen: self._maybe_finish(t, g),
        )

    def _reshare(self, resources) -> None:
        """Settle and re-rate every transfer touching the given resources.

        A wake-up is only (re)scheduled when the new completion estimate is
        earlier than the pending one; a late estimate lets the pending event
        fire, notice the shortfall, and push itself out.
        """
        now = self._engine.now
        affected: dict[_Transfer, None] = {}
        for r in resources:
            affected.update(r.transfers)
        for tr in affected:
            if now > tr.last_t and tr.rate > 0:
                tr.remaining -= tr.rate * (now - tr.last_t) / 1e9
                if tr.remaining < 0:
                    tr.remaining = 0.0
            tr.last_t = now
        for tr in affected:
            tr.rate = self._rate_of(tr)
            eta = now + max(0, math.ceil(tr.remaining * 1e9 / tr.rate))
            if tr.next_eta is None or eta < tr.next_eta:
                self._schedule_eta(tr, eta)

    def _maybe_finish(self, tr: _Transfer, gen: int) -> None:
        if gen != tr.gen or not tr.running:
            return
        now = self._engine.now
        if now > tr.last_t and tr.rate > 0:
            tr.remaining -= tr.rate * (now - tr.last_t) / 1e9
        tr.last_t = now
        if tr.remaining > self.EPSILON:
            eta = now + max(0, math.ceil(tr.remaining * 1e9 / tr.rate))
            self._schedule_eta(tr, eta)
            return
        tr.running = False
        tr.gen += 1
        tr.next_eta = None
        for r in tr.resources:
            del r.transfers[tr]
        self._reshare(tr.resources)
        self._fire(tr)

    def _fire(self, tr: _Transfer) -> None:
        if tr.min_end is not None and tr.min_end > self._engine.now:
            self._engine.schedule(
                tr.min_end, EventKind.DMA_COMPLETE, lambda: tr.done.fire()
            )
        else:
            tr.done.fire()


class CxlPort:
    """A compute node's fabric access point: windowed load/store issue plus
    the node's full-duplex link, one bandwidth share per direction, used by
    remote load/store traffic, cache fills, and pool-NIC DMA."""

    def __init__(self, engine: Engine, fluid: FluidNet, cn_id: int,
                 link_in: BandwidthShare, link_out: BandwidthShare,
                 profile: LatencyProfile, window: AccessWindow):
        self._engine = engine
        self._fluid = fluid
        self.cn_id = cn_id
        self.link_in = link_in  # fabric -> node (reads, fills)
        self.link_out = link_out  # node -> fabric (stores, DMA out)
        self.profile = profile
        self.window = window

    def link(self, direction: str) -> BandwidthShare:
        return self.link_in if direction == "in" else self.link_out

    def base_ns(self, device: MemoryDevice) -> int:
        return (self.profile.local_base if device.is_local_to(self.cn_id)
                else self.profile.remote_base)

    def rtt_ns(self, device: MemoryDevice) -> int:
        return 2 * self.base_ns(device)

    def loadstore(self, device: Optional[MemoryDevice], nbytes: int,
                  direction: str = "in") -> Completion:
        """Stream nbytes of cacheline load/store traffic to a device.

        direction is "in" for loads (data toward the node) and "out" for
        stores.  Partial lines round up.  Completion is rounds*RTT at
        minimum; device or link saturation stretches it via the fluid model.
        """
        if device is None:
            raise UnreachableDevice("no target device")
        w = self.window
        lines = max(1, math.ceil(nbytes / w.line_size))
        rounds = math.ceil(lines / w.max_outstanding)
        rtt = self.rtt_ns(device)
        floor_end = self._engine.now + rounds * rtt
        cap = w.max_outstanding * w.line_size * 1e9 / rtt
        dev_share = (device.read_share if direction == "in"
                     else device.write_share)
        resources = [dev_share]
        if not device.is_local_to(self.cn_id):
            resources.append(self.link(direction))
        return self._fluid.start(
            lines * w.line_size, resources, cap_bps=cap, min_end=floor_end
        )


def bulk_transfer(fluid: FluidNet, nbytes: int,
                  resources: Sequence[BandwidthShare],
                  startup_ns: int) -> Completion:
    """CXL.io-style pipelined transfer: startup latency then path-limited
    fluid bandwidth; not window-limited.  Zero bytes costs startup only."""
    return fluid.start(nbytes, resources, startup_ns=startup_ns)


class EthernetLink:
    """FIFO serialising link: frames depart back-to-back at line rate and
    arrive one propagation delay after their serialisation ends."""

    def __init__(self, engine: Engine, spec: LinkSpec, mtu: int = 4096,
                 name: str = "eth"):
        self.engine = engine
        self.spec = spec
        self.mtu = mtu
        self.name = name
        self.free_at = 0
        self.bytes_carried = 0

    def serialization_ns(self, nbytes: int) -> int:
        return math.ceil(nbytes * 1e9 / self.spec.bandwidth)

    def send(self, nbytes: int) -> tuple[int, Completion]:
        """Returns (departure_end_ns, delivery completion)."""
        if nbytes > self.mtu:
            raise OversizeFrame(f"{nbytes} B > MTU {self.mtu} on {self.name}")
        start = max(self.engine.now, self.free_at)
        departure = start + self.serialization_ns(nbytes)
        self.free_at = departure
        self.bytes_carried += nbytes
        delivery = self.engine.completion_at(
            departure + self.spec.propagation, EventKind.LINK_DELIVERY
        )
        return departure, delivery
