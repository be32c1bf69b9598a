"""Inter-rack data path through the pooled NICs.

Each NIC carries three physical queues: a work queue fed by the dataplane
(tx_phq), a receive queue of pre-posted pool buffers (rx_phq), and a
completion queue drained by a dedicated poller that routes arrivals to the
destination node's virtual queue.  Virtual queues are mapped onto NICs by
the control-plane scheduler using least queue depth; a queue keeps its NIC
while it has packets in flight so per-subflow order is preserved, and the
receiver resequences subflows back into one in-order byte stream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .fabric import BandwidthShare, EthernetLink, FluidNet, LinkSpec
from .mem_pool import BufferRef, MemoryPool, PoolExhausted
from .sim_core import Completion, Engine, EventKind, Notify, SerialResource
from .tor_baseline import TcpCwnd


@dataclass
class NicPoolParams:
    phq_depth: int = 1024
    rx_post_target: int = 64  # pre-posted buffers kept per NIC
    dma_depth: int = 4  # concurrent DMA engines per NIC per direction
    sched_epoch_ns: int = 100_000
    phq_op_ns: int = 1_300  # SN-local physical-queue load/store
    poll_period_ns: int = 10_000
    batch: int = 32
    rxq_op_ns: int = 13_000  # store into a node's virtual RxQ
    interrupt_ns: int = 6_500
    remote_base_ns: int = 6_500
    mtu: int = 4096


class Packet:
    """A segment in flight between racks (descriptor plus path bookkeeping)."""

    __slots__ = ("d", "qkey", "nic_idx")

    def __init__(self, d, qkey, nic_idx):
        self.d = d
        self.qkey = qkey
        self.nic_idx = nic_idx


class NicDevice:
    def __init__(self, engine: Engine, rack_id: int, idx: int, bandwidth: int,
                 params: NicPoolParams):
        self.idx = idx
        self.bandwidth = bandwidth
        self.serializer = EthernetLink(
            engine, LinkSpec(bandwidth, 0, "ethernet-link"),
            mtu=params.mtu, name=f"r{rack_id}.nic{idx}")
        self.tx_phq: deque[Packet] = deque()
        self.tx_reserved = 0
        self.rx_posted: deque[BufferRef] = deque()
        self.completion_phq: deque[tuple[Packet, BufferRef]] = deque()
        self.arrivals: deque[Packet] = deque()
        self.tx_work = Notify(engine)
        self.rx_work = Notify(engine)
        self.posted = Notify(engine)
        self.tx_dma_slot = Notify(engine)
        self.rx_dma_slot = Notify(engine)
        self.tx_dma_inflight = 0
        self.rx_dma_inflight = 0
        self.tx_dma_seq = 0
        self.tx_release_next = 0
        self.tx_ready: dict[int, Packet] = {}
        self.rx_dma_seq = 0
        self.rx_release_next = 0
        self.rx_ready: dict[int, tuple[Packet, BufferRef]] = {}
        # dispatched but not yet on the wire; the scheduler's depth signal
        self.occupancy = 0

    def tx_depth(self) -> int:
        return self.occupancy

    def phq_free(self, depth_limit: int) -> bool:
        return len(self.tx_phq) + self.tx_reserved < depth_limit


class Resequencer:
    """Receiver-side reassembly of one byte stream split over subflows.

    Out-of-order segments are buffered; duplicates are discarded; the
    delivered prefix is gapless.
    """

    def __init__(self):
        self.expected = 0
        self.buffered: dict[int, object] = {}
        self.duplicates = 0

    def insert(self, offset: int, length: int, item) -> tuple[list, bool]:
        """Returns (items now deliverable in order, was_duplicate)."""
        if offset < self.expected or offset in self.buffered:
            self.duplicates += 1
            return [], True
        self.buffered[offset] = (length, item)
        ready = []
        while self.expected in self.buffered:
            ln, it = self.buffered.pop(self.expected)
            ready.append(it)
            self.expected += ln
        return ready, False


class SubflowPacer:
    """Windowed pacing for one subflow: in-flight segments are bounded by a
    shared AIMD window that grows on (delayed) delivery feedback.  The pool
    path is loss-free, so the window only ever grows."""

    def __init__(self, engine: Engine, credit: Notify, ack_delay_ns: int,
                 initial_cwnd: int = 10):
        self._engine = engine
        self._credit = credit
        self._ack_delay = ack_delay_ns
        self.cwnd = TcpCwnd(initial_cwnd)
        self.outstanding = 0

    def can_send(self) -> bool:
        return self.outstanding < int(self.cwnd.cwnd)

    def on_send(self) -> None:
        self.outstanding += 1

    def on_delivered(self) -> None:
        self._engine.after(self._ack_delay, EventKind.TIMER, self._on_ack)

    def _on_ack(self) -> None:
        self.outstanding -= 1
        self.cwnd.on_ack(1)
        self._credit.fire()


class NullPacer:
    """Intra-rack connections are not windowed."""

    def can_send(self) -> bool:
        return True

    def on_send(self) -> None:
        pass

    def on_delivered(self) -> None:
        pass


class LppuScheduler:
    """Control-plane mapping of virtual TxQs onto NICs by least tx_phq depth.

    A queue is remapped only when it has nothing in flight and its current
    assignment is at least one scheduling epoch old, so packets of a subflow
    never race each other over different NICs.
    """

    def __init__(self, engine: Engine, nics: list[NicDevice], epoch_ns: int):
        self._engine = engine
        self.nics = nics
        self.epoch_ns = epoch_ns
        self.mapping: dict = {}
        self.assigned_at: dict = {}
        self.inflight: dict = {}
        # queues mapped to each NIC that currently have packets in flight;
        # steadier than instantaneous queue depth between bursts
        self.active_queues = [0] * len(nics)

    def _load(self, idx: int) -> tuple:
        return (self.nics[idx].tx_depth(), self.active_queues[idx], idx)

    def nic_for(self, qkey) -> NicDevice:
        now = self._engine.now
        idx = self.mapping.get(qkey)
        if idx is None:
            idx = min(range(len(self.nics)), key=self._load)
            self.mapping[qkey] = idx
            self.assigned_at[qkey] = now
            self._engine.emit_trace(ev="txq_map", q=str(qkey), nic=idx)
        elif (self.inflight.get(qkey, 0) == 0
              and now - self.assigned_at[qkey] >= self.epoch_ns):
            best = min(range(len(self.nics)), key=self._load)
            self.assigned_at[qkey] = now
            # move only on strict improvement: an idle queue stays put
            if self._load(best)[:2] < self._load(idx)[:2]:
                idx = best
                self.mapping[qkey] = idx
                self._engine.emit_trace(ev="txq_map", q=str(qkey), nic=idx)
        return self.nics[idx]

    def note_dispatch(self, qkey) -> None:
        n = self.inflight.get(qkey, 0)
        self.inflight[qkey] = n + 1
        if n == 0:
            self.active_queues[self.mapping[qkey]] += 1

    def note_settled(self, qkey) -> None:
        self.inflight[qkey] -= 1
        if self.inflight[qkey] == 0:
            self.active_queues[self.mapping[qkey]] -= 1


class NicPool:
    """One rack's NIC pool: egress (DMA read + serialise), ingress (DMA
    write into pre-posted buffers + completion), posting and polling."""

    def __init__(self, engine: Engine, rack_id: int, fluid: FluidNet,
                 pool: MemoryPool, nic_bandwidths: list[int],
                 params: NicPoolParams, lppu_node, directory,
                 cn_link_of: Callable[[int], Optional[BandwidthShare]],
                 rx_device_ids: list[int]):
        self.engine = engine
        self.rack_id = rack_id
        self.fluid = fluid
        self.pool = pool
        self.params = params
        self.lppu_node = lppu_node
        self.directory = directory
        self.cn_link_of = cn_link_of
        self.nics = [NicDevice(engine, rack_id, i, bw, params)
                     for i, bw in enumerate(nic_bandwidths)]
        self.lppu = LppuScheduler(engine, self.nics, params.sched_epoch_ns)
        self.lppu_cpu = SerialResource(engine)
        self.trunk_out: Optional[EthernetLink] = None  # set by the builder
        self.remote: Optional["NicPool"] = None
        self.router = None  # completion routing into host RxQs
        self.completion_work = Notify(engine)
        self.replenish_wake = Notify(engine)
        self.pool_free = Notify(engine)
        pool.free_notify_cbs.append(self.pool_free.fire)
        self._rx_devices = rx_device_ids
        self._rx_dev_cursor = 0
        self.pending_post = 0
        self._poller_idle = True

    def start(self) -> None:
        for nic in self.nics:
            self.engine.spawn(self._tx_loop(nic))
            self.engine.spawn(self._rx_loop(nic))
        self.engine.spawn(self._replenish_loop())
        self.engine.spawn(self._completion_loop())

    # -- egress --------------------------------------------------------------

    def try_enqueue(self, qkey, d) -> bool:
        """Dataplane hand-off of one descriptor; False defers it in order."""
        nic = self.lppu.nic_for(qkey)
        if not nic.phq_free(self.params.phq_depth):
            return False
        nic.tx_reserved += 1
        nic.occupancy += 1
        self.lppu.note_dispatch(qkey)
        pkt = Packet(d, qkey, nic.idx)
        self.engine.after(self.params.phq_op_ns, EventKind.TIMER,
                          lambda: self._tx_land(nic, pkt))
        return True

    def _tx_land(self, nic: NicDevice, pkt: Packet) -> None:
        nic.tx_reserved -= 1
        nic.tx_phq.append(pkt)
        nic.tx_work.fire()

    def _tx_loop(self, nic: NicDevice):
        p = self.params
        while True:
            if not nic.tx_phq:
                yield nic.tx_work
                continue
            while nic.tx_dma_inflight >= p.dma_depth:
                yield nic.tx_dma_slot
            pkt = nic.tx_phq.popleft()
            nic.tx_dma_inflight += 1
            seq = nic.tx_dma_seq
            nic.tx_dma_seq += 1
            dev = self.pool.device_of(pkt.d.ref)
            resources = [dev.read_share]
            # reading a node-local device pulls data out through its port
            link = (self.cn_link_of(dev.cn_id, "out")
                    if dev.cn_id is not None else None)
            if link is not None:
                resources.append(link)
            self.fluid.start(
                pkt.d.length, resources, startup_ns=p.remote_base_ns
            ).subscribe(lambda _v, n=nic, s=seq, k=pkt: self._tx_dma_done(n, s, k))

    def _tx_dma_done(self, nic: NicDevice, seq: int, pkt: Packet) -> None:
        nic.tx_dma_inflight -= 1
        nic.tx_dma_slot.fire()
        nic.tx_ready[seq] = pkt
        while nic.tx_release_next in nic.tx_ready:
            nxt = nic.tx_ready.pop(nic.tx_release_next)
            nic.tx_release_next += 1
            dep, _ = nic.serializer.send(nxt.d.length)
            self.engine.schedule(dep, EventKind.LINK_DELIVERY,
                                 lambda k=nxt, n=nic: self._after_serialize(n, k))

    def _after_serialize(self, nic: NicDevice, pkt: Packet) -> None:
        d = pkt.d
        nic.occupancy -= 1
        m = self.engine.metrics
        m.bucket(self.engine.now, "pool_egress_bytes", d.length)
        self.engine.emit_trace(ev="nic_tx", rack=self.rack_id, src=d.src,
                               nic=nic.idx, flow=d.conn_id,
                               subflow=d.subflow, offset=d.offset)
        self.directory.invalidate_everywhere(d.ref)
        self.pool.free_buffer(d.ref)
        _dep, delivery = self.trunk_out.send(d.length)
        delivery.subscribe(lambda _v: self.remote.arrive(pkt))

    # -- ingress ---------------------------------------------------------------

    def arrive(self, pkt: Packet) -> None:
        nic = self.nics[pkt.nic_idx]
        nic.arrivals.append(pkt)
        nic.rx_work.fire()

    def _rx_loop(self, nic: NicDevice):
        p = self.params
        m = self.engine.metrics
        while True:
            if not nic.arrivals:
                yield nic.rx_work
                continue
            if not nic.rx_posted:
                # never dropped: the packet stalls until buffers are posted
                m.count("rx_underflow")
                yield nic.posted
                continue
            pkt = nic.arrivals.popleft()
            buf = nic.rx_posted.popleft()
            self.replenish_wake.fire()
            while nic.rx_dma_inflight >= p.dma_depth:
                yield nic.rx_dma_slot
            nic.rx_dma_inflight += 1
            seq = nic.rx_dma_seq
            nic.rx_dma_seq += 1
            dev = self.pool.device_of(buf)
            resources = [dev.write_share]
            # writing a node-local device pushes data in through its port
            link = (self.cn_link_of(dev.cn_id, "in")
                    if dev.cn_id is not None else None)
            if link is not None:
                resources.append(link)
            self.fluid.start(
                pkt.d.length, resources, startup_ns=p.remote_base_ns
            ).subscribe(lambda _v, n=nic, s=seq, k=pkt, b=buf:
                        self._rx_dma_done(n, s, k, b))

    def _rx_dma_done(self, nic: NicDevice, seq: int, pkt: Packet,
                     buf: BufferRef) -> None:
        nic.rx_dma_inflight -= 1
        nic.rx_dma_slot.fire()
        nic.rx_ready[seq] = (pkt, buf)
        while nic.rx_release_next in nic.rx_ready:
            nxt, nbuf = nic.rx_ready.pop(nic.rx_release_next)
            nic.rx_release_next += 1
            self._complete(nic, nxt, nbuf)

    def _complete(self, nic: NicDevice, pkt: Packet, buf: BufferRef) -> None:
        m = self.engine.metrics
        m.bucket(self.engine.now, "pool_ingress_bytes", pkt.d.length)
        self.engine.emit_trace(ev="subflow_rx", rack=self.rack_id,
                               nic=nic.idx, flow=pkt.d.conn_id,
                               subflow=pkt.d.subflow, offset=pkt.d.offset)
        self.directory.invalidate_everywhere(buf)
        self.remote.lppu.note_settled(pkt.qkey)
        nic.completion_phq.append((pkt, buf))
        self.completion_work.fire()

    # -- receive-buffer posting -------------------------------------------------

    def _alloc_rx_buffer(self) -> BufferRef:
        dev_id = self._rx_devices[self._rx_dev_cursor % len(self._rx_devices)]
        self._rx_dev_cursor += 1
        ref = self.pool.alloc_shared_buffer(self.lppu_node, self.params.mtu,
                                            "fabric-attached", device_hint=dev_id)
        return ref

    def post_receive_buffers(self, count: int) -> int:
        """Pre-post `count` MTU-class buffers round-robin across NICs and
        memory devices (bootstrap path, no simulated cost)."""
        posted = 0
        for i in range(count):
            nic = self.nics[i % len(self.nics)]
            if len(nic.rx_posted) >= self.params.phq_depth:
                self.pending_post += 1
                continue
            try:
                ref = self._alloc_rx_buffer()
            except PoolExhausted:
                self.pending_post += count - i
                break
            nic.rx_posted.append(ref)
            nic.posted.fire()
            posted += 1
        return posted

    def _replenish_loop(self):
        p = self.params
        low = max(1, p.rx_post_target // 2)
        while True:
            did_work = False
            for nic in self.nics:
                space = p.phq_depth - len(nic.rx_posted)
                want = 0
                if len(nic.rx_posted) < low:
                    want = p.rx_post_target - len(nic.rx_posted)
                elif self.pending_post > 0 and space > 0:
                    want = min(self.pending_post, space)
                while want > 0:
                    did_work = True
                    yield from self.lppu_cpu.busy(p.phq_op_ns)
                    try:
                        ref = self._alloc_rx_buffer()
                    except PoolExhausted:
                        self.engine.metrics.count("rx_post_backpressure")
                        yield self.pool_free
                        break
                    nic.rx_posted.append(ref)
                    nic.posted.fire()
                    if self.pending_post:
                        self.pending_post -= 1
                    want -= 1
            if not did_work:
                yield self.replenish_wake

    # -- completion polling -------------------------------------------------------

    def _completion_loop(self):
        p = self.params
        while True:
            if not any(nic.completion_phq for nic in self.nics):
                yield self.completion_work
                continue
            tick = ((self.engine.now + p.poll_period_ns - 1)
                    // p.poll_period_ns) * p.poll_period_ns
            if tick > self.engine.now:
                yield self.engine.sleep(tick - self.engine.now,
                                        EventKind.POLL_TICK)
            pending = [nic for nic in self.nics if nic.completion_phq]
            barrier = Completion(self.engine)
            remaining = [len(pending)]

            def finish(_v=None):
                remaining[0] -= 1
                if remaining[0] == 0:
                    barrier.fire()

            for nic in pending:
                self.engine.spawn(self._drain_completions(nic, p.batch, finish))
            yield barrier

    def _drain_completions(self, nic: NicDevice, budget: int, finish):
        p = self.params
        while budget > 0 and nic.completion_phq:
            yield self.engine.sleep(p.phq_op_ns, EventKind.POLL_TICK)
            if not nic.completion_phq:
                break
            pkt, buf = nic.completion_phq[0]
            if not self.router.try_reserve(pkt):
                break  # destination RxQ full: deferred in order
            nic.completion_phq.popleft()
            budget -= 1
            self.engine.after(
                p.rxq_op_ns, EventKind.TIMER,
                lambda k=pkt, b=buf: self.router.land(k, b))
        finish()
