"""Pass-by-reference transport: virtual queues, the per-node dataplane that
polls them, interrupts, and the socket-like runtime on each node.

Sending copies the payload once (user buffer -> pool buffer, a write-around
store), then only a descriptor travels: through the sender's TxQ, the port
dataplane, and either the destination's RxQ (intra-rack) or the NIC pool
(inter-rack).  Receiving pops the descriptor, reads the payload through the
DRAM cache, delivers the bytes to the application stream in order, and frees
the buffer, flushing its cache line.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .dram_cache import DramCache
from .mem_pool import BufferRef, MemoryPool, PoolExhausted
from .nic_pool import NullPacer, Resequencer
from .sim_core import (
    Completion,
    Engine,
    EventKind,
    Notify,
    SerialResource,
    Watermark,
)


class QueueFull(Exception):
    pass


class QueueEmpty(Exception):
    pass


@dataclass
class TransportParams:
    mtu: int = 4096
    poll_period_ns: int = 10_000
    batch: int = 32
    vq_capacity: int = 256
    fill_depth: int = 8  # concurrent cache-line fetches per node
    tsq_enabled: bool = False
    tsq_limit: int = 2
    concurrent_txq_polling: bool = True
    txq_op_ns: int = 13_000  # dataplane descriptor fetch from a TxQ
    rxq_op_ns: int = 13_000  # dataplane store into a peer RxQ
    local_q_op_ns: int = 1_300  # a node's own push/pop round trip
    interrupt_ns: int = 6_500
    interrupt_delay_ns: int = 2_000
    free_op_ns: int = 500
    ack_delay_ns: int = 32_500
    initial_cwnd: int = 10


@dataclass
class Descriptor:
    src: int
    dst: int
    ref: BufferRef
    length: int
    conn_id: int
    subflow: int
    offset: int  # position in the connection's directed byte stream

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("descriptor endpoints must differ")
        if self.ref is not None and self.length > self.ref.len:
            raise ValueError("descriptor length exceeds its buffer")


class VirtQueue:
    """Circular descriptor queue in the memory pool (FIFO, bounded)."""

    def __init__(self, name: str, role: str, capacity: int, engine: Engine):
        self.name = name
        self.role = role
        self.capacity = capacity
        self.entries: deque[Descriptor] = deque()
        self.reserved = 0
        self.pushes = 0
        self.pops = 0
        self.space = Notify(engine)

    def full(self) -> bool:
        return len(self.entries) + self.reserved >= self.capacity

    def reserve(self) -> None:
        if self.full():
            raise QueueFull(self.name)
        self.reserved += 1

    def commit(self, d: Descriptor) -> None:
        self.reserved -= 1
        self.entries.append(d)
        self.pushes += 1

    def push(self, d: Descriptor) -> None:
        if self.full():
            raise QueueFull(self.name)
        self.entries.append(d)
        self.pushes += 1

    def pop(self) -> Descriptor:
        if not self.entries:
            raise QueueEmpty(self.name)
        self.pops += 1
        d = self.entries.popleft()
        self.space.fire()
        return d

    def peek(self) -> Descriptor:
        if not self.entries:
            raise QueueEmpty(self.name)
        return self.entries[0]


class _Stream:
    """One direction of a connection's byte stream."""

    __slots__ = ("sent_offset", "delivered", "resequencer", "tsq_outstanding",
                 "rr_next", "first_send_t", "last_delivery_t")

    def __init__(self, engine: Engine, n_subflows: int):
        self.sent_offset = 0
        self.delivered = Watermark(engine)
        self.resequencer = Resequencer()
        self.tsq_outstanding = [0] * max(1, n_subflows)
        self.rr_next = 0
        self.first_send_t: Optional[int] = None
        self.last_delivery_t: Optional[int] = None


class Connection:
    """Bidirectional stream between two nodes (used by both systems)."""

    def __init__(self, engine: Engine, conn_id: int, a: int, b: int,
                 inter_rack: bool, tsq_enabled: bool = False,
                 tsq_limit: int = 2, n_subflows: int = 1):
        if a == b:
            raise ValueError("connection endpoints must differ")
        self.id = conn_id
        self.a = a
        self.b = b
        self.inter_rack = inter_rack
        self.tsq_enabled = tsq_enabled
        self.tsq_limit = tsq_limit
        self.n_subflows = max(1, n_subflows)
        self.credit = Notify(engine)
        self.streams = {a: _Stream(engine, self.n_subflows),
                        b: _Stream(engine, self.n_subflows)}
        self.pacers = {a: [NullPacer()] * self.n_subflows,
                       b: [NullPacer()] * self.n_subflows}

    def other(self, cn: int) -> int:
        return self.b if cn == self.a else self.a

    def delivered_to(self, cn: int) -> Watermark:
        """Bytes delivered at cn, i.e. the opposite direction's stream."""
        return self.streams[self.other(cn)].delivered

    def set_tsq(self, enabled: bool) -> None:
        self.tsq_enabled = enabled


class DFabricHost:
    """Per-node runtime: send/recv over shared-memory descriptors."""

    def __init__(self, engine: Engine, cn_id: int, rack_id: int,
                 pool: MemoryPool, cache: DramCache, params: TransportParams,
                 n_subflow_queues: int,
                 pool_read: Callable[[BufferRef, int], Completion],
                 pool_write: Callable[[BufferRef, int], Completion]):
        self.engine = engine
        self.cn_id = cn_id
        self.rack_id = rack_id
        self.pool = pool
        self.cache = cache
        self.params = params
        self.cpu = SerialResource(engine)
        self._pool_read = pool_read
        self._pool_write = pool_write
        self.n_subflow_queues = n_subflow_queues
        self.txqs = [VirtQueue(f"cn{cn_id}.txq{i}", "TxQ", params.vq_capacity,
                               engine) for i in range(1 + n_subflow_queues)]
        self.rxqs = [VirtQueue(f"cn{cn_id}.rxq{i}", "RxQ", params.vq_capacity,
                               engine) for i in range(1 + n_subflow_queues)]
        self.interrupt = Notify(engine)
        self.reader_work = Notify(engine)
        self.pool_free = Notify(engine)
        pool.free_notify_cbs.append(self.pool_free.fire)
        self.pending_reads: deque[tuple[Descriptor, Completion]] = deque()
        self._fill_queue: deque[Descriptor] = deque()
        self._fills_inflight = 0
        self.conns: dict[int, Connection] = {}
        self.asic: Optional["AsicDataplane"] = None
        self.queue_backing = pool.alloc_section(cn_id, 4096, "local")
        engine.spawn(self._rx_drain_loop())
        engine.spawn(self._reader_loop())

    # -- app API -------------------------------------------------------------

    def open_connection(self, conn: Connection) -> None:
        self.conns[conn.id] = conn

    def set_tsq(self, conn: Connection, enabled: bool) -> None:
        conn.set_tsq(enabled)

    def send(self, conn: Connection, nbytes: int) -> Completion:
        """Segment and push nbytes; the completion fires when every segment
        has been pushed (delivery is observed via conn.delivered_to)."""
        done = Completion(self.engine)
        if nbytes == 0:
            done.fire()
            return done
        self.engine.spawn(self._send_proc(conn, nbytes, done))
        return done

    def _send_proc(self, conn: Connection, nbytes: int, done: Completion):
        p = self.params
        stream = conn.streams[self.cn_id]
        offset = stream.sent_offset
        stream.sent_offset += nbytes
        remaining = nbytes
        pacers = conn.pacers[self.cn_id]
        n_sub = conn.n_subflows if conn.inter_rack else 1
        metrics = self.engine.metrics
        while remaining > 0:
            seg = min(p.mtu, remaining)
            sub = stream.rr_next if conn.inter_rack else 0
            pacer = pacers[sub]
            while ((conn.tsq_enabled
                    and stream.tsq_outstanding[sub] >= conn.tsq_limit)
                   or not pacer.can_send()):
                yield conn.credit
            ref = None
            while ref is None:
                try:
                    ref = self.pool.alloc_shared_buffer(self.cn_id, seg, "local")
                except PoolExhausted:
                    metrics.count("send_alloc_backpressure")
                    yield self.pool_free
            # the single data copy: user bytes into the pool buffer
            yield self.cpu.acquire()
            yield self.cache.write_around(ref, seg)
            self.cpu.release()
            metrics.count("data_copies")
            q = self.txqs[0 if not conn.inter_rack else 1 + sub]
            while q.full():
                yield q.space
            yield from self.cpu.busy(p.local_q_op_ns)
            while q.full():
                yield q.space
            d = Descriptor(self.cn_id, conn.other(self.cn_id), ref, seg,
                           conn.id, sub, offset)
            q.push(d)
            if stream.first_send_t is None:
                stream.first_send_t = self.engine.now
            stream.tsq_outstanding[sub] += 1
            pacer.on_send()
            metrics.count("bytes_sent", seg)
            metrics.bucket(self.engine.now, "bytes_sent", seg)
            self.engine.emit_trace(ev="push", cn=self.cn_id, flow=conn.id,
                                   subflow=sub, offset=offset, len=seg)
            if self.asic is not None:
                self.asic.kick()
            offset += seg
            remaining -= seg
            if conn.inter_rack:
                stream.rr_next = (sub + 1) % n_sub
        done.fire()

    # -- receive path ----------------------------------------------------------

    def _rx_drain_loop(self):
        p = self.params
        while True:
            if not any(q.entries for q in self.rxqs):
                yield self.interrupt
                continue
            yield from self.cpu.busy(p.interrupt_delay_ns)
            while any(q.entries for q in self.rxqs):
                for q in self.rxqs:
                    for _ in range(len(q.entries)):
                        yield from self.cpu.busy(p.local_q_op_ns)
                        d = q.pop()
                        self._admit(d)

    def _admit(self, d: Descriptor) -> None:
        conn = self.conns.get(d.conn_id)
        if conn is None:
            self.engine.metrics.count("unknown_connection_descriptors")
            self.pool.free_buffer(d.ref)
            return
        stream = conn.streams[d.src]
        ready, dup = stream.resequencer.insert(d.offset, d.length, d)
        if dup:
            self.engine.metrics.count("duplicate_segments")
            self.cache.flush(d.ref)
            self.pool.free_buffer(d.ref)
            return
        if ready:
            self._fill_queue.extend(ready)
            self._issue_fills()

    def _issue_fills(self) -> None:
        """Prefetch deliverable lines, bounded by the node's fill pipeline."""
        while self._fill_queue and self._fills_inflight < self.params.fill_depth:
            rd = self._fill_queue.popleft()
            fill, _hit = self.cache.ensure(rd.ref)
            self._fills_inflight += 1
            fill.subscribe(self._fill_done)
            self.pending_reads.append((rd, fill))
            self.reader_work.fire()

    def _fill_done(self, _value=None) -> None:
        self._fills_inflight -= 1
        self._issue_fills()

    def _reader_loop(self):
        p = self.params
        metrics = self.engine.metrics
        while True:
            if not self.pending_reads:
                yield self.reader_work
                continue
            d, fill = self.pending_reads.popleft()
            yield fill
            conn = self.conns[d.conn_id]
            # consume the payload: local latency when cached, pool otherwise
            self.pool.translate(self.cn_id, d.ref.addr)  # permission check
            if self.cache.is_cacheable(d.ref):
                service = self.cache.local_service(d.length)
            else:
                service = self._pool_read(d.ref, d.length)
            yield self.cpu.acquire()
            yield service
            self.cpu.release()
            stream = conn.streams[d.src]
            metrics.count("bytes_received", d.length)
            metrics.bucket(self.engine.now, "bytes_received", d.length)
            stream.last_delivery_t = self.engine.now
            stream.tsq_outstanding[d.subflow] -= 1
            conn.pacers[d.src][d.subflow].on_delivered()
            self.engine.emit_trace(ev="deliver", cn=self.cn_id, flow=conn.id,
                                   subflow=d.subflow, offset=d.offset,
                                   len=d.length)
            stream.delivered.advance(d.length)
            conn.credit.fire()
            yield from self.cpu.busy(p.free_op_ns)
            self.cache.flush(d.ref)
            self.pool.free_buffer(d.ref)


class AsicDataplane:
    """The dataplane at one node's fabric port: polls the node's TxQs every
    poll period and dispatches descriptors.

    With concurrent polling each queue is drained by its own pipeline; the
    serialised ablation walks all queues with a single pipeline, which caps
    the node's aggregate descriptor rate at one fetch per txq_op.
    """

    def __init__(self, engine: Engine, host: DFabricHost,
                 params: TransportParams, hosts: dict[int, DFabricHost],
                 nic_sink, grant: Callable[[Descriptor], None]):
        self.engine = engine
        self.host = host
        self.params = params
        self.hosts = hosts
        self.nic_sink = nic_sink
        self.grant = grant
        self.work = Notify(engine)
        self._idle = True
        host.asic = self
        engine.spawn(self._loop())

    def _is_intra(self, d: Descriptor) -> bool:
        dst = self.hosts.get(d.dst)
        return dst is not None and dst.rack_id == self.host.rack_id

    def kick(self) -> None:
        if self._idle:
            self.work.fire()

    def _has_work(self) -> bool:
        return any(q.entries for q in self.host.txqs)

    def _loop(self):
        p = self.params
        while True:
            if not self._has_work():
                self._idle = True
                yield self.work
                self._idle = False
                continue
            tick = ((self.engine.now + p.poll_period_ns - 1)
                    // p.poll_period_ns) * p.poll_period_ns
            if tick > self.engine.now:
                yield self.engine.sleep(tick - self.engine.now,
                                        EventKind.POLL_TICK)
            queues = [(i, q) for i, q in enumerate(self.host.txqs) if q.entries]
            if p.concurrent_txq_polling:
                barrier = Completion(self.engine)
                remaining = [len(queues)]

                def finish(_v=None):
                    remaining[0] -= 1
                    if remaining[0] == 0:
                        barrier.fire()

                for idx, q in queues:
                    self.engine.spawn(self._drain(idx, q, p.batch, finish))
                yield barrier
            else:
                for idx, q in queues:
                    yield from self._drain(idx, q, p.batch, lambda _v=None: None)

    def _drain(self, qidx: int, q: VirtQueue, budget: int, finish):
        p = self.params
        while budget > 0 and q.entries:
            yield self.engine.sleep(p.txq_op_ns, EventKind.POLL_TICK)
            if not q.entries:
                break
            d = q.peek()
            # split transaction: peer node in this rack, or the NIC pool
            if self._is_intra(d):
                dst = self.hosts[d.dst]
                rxq = dst.rxqs[0]
                if rxq.full():
                    break  # destination RxQ full: deferred, order preserved
                rxq.reserve()
                q.pop()
                self.engine.after(
                    p.rxq_op_ns, EventKind.TIMER,
                    lambda dd=d, h=dst: self._land_intra(h, dd))
            else:
                if not self.nic_sink.try_enqueue((self.host.cn_id, qidx), d):
                    break  # NIC work queue full: descriptor deferred in order
                q.pop()
            budget -= 1
        finish()

    def _land_intra(self, dst: DFabricHost, d: Descriptor) -> None:
        self.grant(d)
        dst.rxqs[0].commit(d)
        self.engine.emit_trace(ev="asic_dispatch", src=d.src, dst=d.dst,
                               flow=d.conn_id, offset=d.offset)
        self.engine.after(self.params.interrupt_ns, EventKind.INTERRUPT,
                          dst.interrupt.fire)
