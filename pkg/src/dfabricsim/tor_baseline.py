"""Conventional ToR-based rack: one private NIC per node, a top-of-rack
switch with drop-tail per-port buffers, and a NewReno-flavoured AIMD TCP.

Timing per network hop is a fixed propagation delay plus FIFO serialisation
at line rate.  Data moves pass-by-value: one user-to-kernel copy per segment
on send and one kernel-to-user copy per segment on in-order delivery.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional

from .sim_core import Completion, Engine, EventKind, Notify, SerialResource


@dataclass
class BaselineParams:
    nic_bandwidth: int = 125_000_000  # bytes/second (B)
    mtu: int = 4096
    uplinks: int = 1
    port_buffer_bytes: int = 256 * 1024
    hop_ns: int = 32_500
    min_rto_ns: int = 5_000_000
    max_rto_ns: int = 60_000_000_000
    initial_cwnd: int = 10
    memcpy_bps: int = 10_000_000_000
    stack_ns: int = 1_000
    ack_bytes: int = 64


class TcpCwnd:
    """AIMD congestion window in segments: slow start doubles per RTT, then
    congestion avoidance adds one segment per RTT.  Also paces pool subflows."""

    __slots__ = ("cwnd", "ssthresh")

    def __init__(self, initial: int = 10):
        self.cwnd = float(initial)
        self.ssthresh = math.inf

    def on_ack(self, acked_segments: int = 1) -> None:
        for _ in range(acked_segments):
            if self.cwnd < self.ssthresh:
                self.cwnd += 1.0
            else:
                self.cwnd += 1.0 / self.cwnd

    def on_fast_retransmit(self) -> None:
        self.cwnd = max(self.cwnd / 2.0, 2.0)
        self.ssthresh = self.cwnd

    def on_timeout(self) -> None:
        self.ssthresh = max(self.cwnd / 2.0, 2.0)
        self.cwnd = 1.0


@dataclass
class Frame:
    src: int
    dst: int
    conn_id: int
    kind: str  # "data" | "ack"
    seq: int  # data: first stream byte; ack: cumulative ack byte
    length: int  # payload bytes
    size: int  # bytes on the wire
    retx: bool = False


class TorPort:
    """One egress port: FIFO serialisation at line rate with a drop-tail byte
    buffer.  buffer_bytes=None gives the unbounded host NIC ring."""

    def __init__(self, engine: Engine, name: str, bandwidth: int, prop_ns: int,
                 buffer_bytes: Optional[int], deliver: Callable[[Frame], None]):
        self.engine = engine
        self.name = name
        self.bandwidth = bandwidth
        self.prop_ns = prop_ns
        self.buffer_bytes = buffer_bytes
        self.deliver = deliver
        self.queue: deque[Frame] = deque()
        self.queued_bytes = 0
        self.busy = False

    def enqueue(self, frame: Frame) -> bool:
        if (self.buffer_bytes is not None
                and self.queued_bytes + frame.size > self.buffer_bytes):
            self.engine.metrics.count("packets_dropped")
            self.engine.emit_trace(ev="drop", port=self.name,
                                   conn=frame.conn_id, seq=frame.seq)
            return False
        self.queue.append(frame)
        self.queued_bytes += frame.size
        if not self.busy:
            self.busy = True
            self._serve()
        return True

    def _serve(self) -> None:
        frame = self.queue[0]
        ser = math.ceil(frame.size * 1e9 / self.bandwidth)
        self.engine.after(ser, EventKind.LINK_DELIVERY, self._departed)

    def _departed(self) -> None:
        frame = self.queue.popleft()
        self.queued_bytes -= frame.size
        self.engine.after(self.prop_ns, EventKind.LINK_DELIVERY,
                          lambda f=frame: self.deliver(f))
        if self.queue:
            self._serve()
        else:
            self.busy = False


class TorSwitch:
    """Per-rack switch: one drop-tail port per node plus uplink ports."""

    def __init__(self, engine: Engine, rack_id: int, params: BaselineParams,
                 cn_ids: list[int], deliver_to_host, deliver_to_peer):
        self.rack_id = rack_id
        self.params = params
        self.cn_ids = set(cn_ids)
        self.cn_ports = {
            cn: TorPort(engine, f"tor{rack_id}.cn{cn}", params.nic_bandwidth,
                        params.hop_ns, params.port_buffer_bytes,
                        lambda f, c=cn: deliver_to_host(c, f))
            for cn in cn_ids
        }
        self.uplinks = [
            TorPort(engine, f"tor{rack_id}.up{u}", params.nic_bandwidth,
                    params.hop_ns, params.port_buffer_bytes, deliver_to_peer)
            for u in range(params.uplinks)
        ]

    def ingress(self, frame: Frame) -> None:
        if frame.dst in self.cn_ids:
            self.cn_ports[frame.dst].enqueue(frame)
        else:
            self.uplinks[frame.conn_id % len(self.uplinks)].enqueue(frame)

    def ingress_from_peer(self, frame: Frame) -> None:
        self.cn_ports[frame.dst].enqueue(frame)


class TcpSender:
    """Send half of one direction of a connection."""

    def __init__(self, engine: Engine, params: BaselineParams, conn, src: int,
                 dst: int, cpu: SerialResource, route: Callable[[Frame], None]):
        self.engine = engine
        self.params = params
        self.conn = conn
        self.src = src
        self.dst = dst
        self.cpu = cpu
        self.route = route
        self.target = 0
        self.snd_una = 0
        self.snd_nxt = 0
        self.segments: dict[int, int] = {}  # seq -> length
        self.sent_info: dict[int, tuple[int, bool]] = {}  # seq -> (t, retx)
        self.cwnd = TcpCwnd(params.initial_cwnd)
        self.dupacks = 0
        self.recover_point = 0
        self.srtt: Optional[int] = None
        self.rttvar = 0
        self.rto_ns = params.min_rto_ns
        self._timer_gen = 0
        self._timer_armed = False
        self._outbox: deque[tuple[int, int, bool]] = deque()
        self._outbox_work = Notify(engine)
        engine.spawn(self._sender_loop())

    # -- app side -----------------------------------------------------------

    def app_send(self, nbytes: int) -> None:
        self.target += nbytes
        self._pump()

    def _pump(self) -> None:
        limit = int(self.cwnd.cwnd) * self.params.mtu
        while (self.snd_nxt < self.target
               and self.snd_nxt - self.snd_una < limit):
            ln = self.segments.get(self.snd_nxt)
            is_retx = ln is not None  # re-sending after a timeout rollback
            if ln is None:
                ln = min(self.params.mtu, self.target - self.snd_nxt)
                self.segments[self.snd_nxt] = ln
            self._outbox.append((self.snd_nxt, ln, is_retx))
            self.snd_nxt += ln
            self._outbox_work.fire()

    def _sender_loop(self):
        p = self.params
        metrics = self.engine.metrics
        while True:
            if not self._outbox:
                yield self._outbox_work
                continue
            seq, ln, is_retx = self._outbox.popleft()
            if is_retx and seq < self.snd_una:
                continue  # acked while the retransmit sat in the queue
            cost = p.stack_ns
            if not is_retx:
                cost += math.ceil(ln * 1e9 / p.memcpy_bps)
            yield from self.cpu.busy(cost)
            if not is_retx:
                metrics.count("data_copies")
                metrics.count("bytes_sent", ln)
                metrics.bucket(self.engine.now, "bytes_sent", ln)
            else:
                metrics.count("retransmissions")
            self.sent_info[seq] = (self.engine.now, is_retx)
            self.route(Frame(self.src, self.dst, self.conn.id, "data",
                             seq, ln, ln, retx=is_retx))
            self._arm_rto()

    # -- protocol events ----------------------------------------------------

    def on_ack(self, ack: int) -> None:
        if ack > self.snd_una:
            info = self.sent_info.get(self.snd_una)
            if info and not info[1]:
                self._rtt_sample(self.engine.now - info[0])
            acked_segs = 0
            seq = self.snd_una
            while seq < ack:
                ln = self.segments.pop(seq, self.params.mtu)
                self.sent_info.pop(seq, None)
                seq += ln
                acked_segs += 1
            self.snd_una = ack
            if self.snd_nxt < self.snd_una:
                self.snd_nxt = self.snd_una  # acked during a timeout rollback
            self.dupacks = 0
            self.cwnd.on_ack(acked_segs)
            if self.snd_una < self.snd_nxt:
                self._arm_rto(restart=True)
            else:
                self._timer_armed = False
                self._timer_gen += 1
            self._pump()
        elif self.snd_una < self.snd_nxt:
            self.dupacks += 1
            if self.dupacks == 3 and self.snd_una >= self.recover_point:
                self.cwnd.on_fast_retransmit()
                self.recover_point = self.snd_nxt
                self._retransmit_head()

    def _retransmit_head(self) -> None:
        ln = self.segments.get(self.snd_una)
        if ln is None:
            return
        self._outbox.append((self.snd_una, ln, True))
        self._outbox_work.fire()

    def _rtt_sample(self, r: int) -> None:
        if self.srtt is None:
            self.srtt = r
            self.rttvar = r // 2
        else:
            self.rttvar = (3 * self.rttvar + abs(self.srtt - r)) // 4
            self.srtt = (7 * self.srtt + r) // 8
        self.rto_ns = max(self.params.min_rto_ns, self.srtt + 4 * self.rttvar)

    def _arm_rto(self, restart: bool = False) -> None:
        if self._timer_armed and not restart:
            return
        self._timer_armed = True
        self._timer_gen += 1
        gen = self._timer_gen
        self.engine.after(self.rto_ns, EventKind.TIMER,
                          lambda: self._rto_fire(gen))

    def _rto_fire(self, gen: int) -> None:
        if gen != self._timer_gen or self.snd_una >= self.snd_nxt:
            return
        self.cwnd.on_timeout()
        self.rto_ns = min(self.rto_ns * 2, self.params.max_rto_ns)
        self.dupacks = 0
        self.recover_point = self.snd_nxt
        # go-back-N: slow start refills the whole unacked window
        self.snd_nxt = self.snd_una
        self._timer_armed = False
        self._arm_rto()
        self._pump()

    @property
    def all_acked(self) -> bool:
        return self.snd_una >= self.target


class TcpReceiver:
    """Receive half: in-order reassembly, cumulative ACKs, app delivery."""

    def __init__(self, engine: Engine, params: BaselineParams, conn, src: int,
                 dst: int, cpu: SerialResource, route: Callable[[Frame], None]):
        self.engine = engine
        self.params = params
        self.conn = conn
        self.src = src  # the remote sender
        self.dst = dst  # this node
        self.cpu = cpu
        self.route = route
        self.rcv_nxt = 0
        self.ooo: dict[int, int] = {}

    def on_data(self, frame: Frame):
        """Generator run under the host's inbox loop (CPU already held)."""
        p = self.params
        metrics = self.engine.metrics
        delivered_segs = []
        if frame.seq == self.rcv_nxt:
            delivered_segs.append(frame.length)
            self.rcv_nxt += frame.length
            while self.rcv_nxt in self.ooo:
                ln = self.ooo.pop(self.rcv_nxt)
                delivered_segs.append(ln)
                self.rcv_nxt += ln
        elif frame.seq > self.rcv_nxt and frame.seq not in self.ooo:
            self.ooo[frame.seq] = frame.length
        for ln in delivered_segs:
            # kernel -> user copy, one per segment
            yield self.engine.sleep(math.ceil(ln * 1e9 / p.memcpy_bps))
            metrics.count("data_copies")
            metrics.count("bytes_received", ln)
            metrics.bucket(self.engine.now, "bytes_received", ln)
            self.conn.streams[self.src].delivered.advance(ln)
        self.route(Frame(self.dst, self.src, self.conn.id, "ack",
                         self.rcv_nxt, 0, p.ack_bytes))


class BaselineHost:
    """A node in the ToR rack: private NIC port plus TCP endpoints."""

    def __init__(self, engine: Engine, cn_id: int, rack_id: int,
                 params: BaselineParams, send_to_tor: Callable[[Frame], None]):
        self.engine = engine
        self.cn_id = cn_id
        self.rack_id = rack_id
        self.params = params
        self.cpu = SerialResource(engine)
        self.nic = TorPort(engine, f"cn{cn_id}.nic", params.nic_bandwidth,
                           params.hop_ns, None, send_to_tor)
        self.senders: dict[int, TcpSender] = {}
        self.receivers: dict[int, TcpReceiver] = {}
        self._inbox: deque[Frame] = deque()
        self._inbox_work = Notify(engine)
        engine.spawn(self._inbox_loop())

    def open_connection(self, conn) -> None:
        peer = conn.other(self.cn_id)
        self.senders[conn.id] = TcpSender(
            self.engine, self.params, conn, self.cn_id, peer, self.cpu,
            self.nic.enqueue)
        self.receivers[conn.id] = TcpReceiver(
            self.engine, self.params, conn, peer, self.cn_id, self.cpu,
            self.nic.enqueue)

    def send(self, conn, nbytes: int) -> Completion:
        done = Completion(self.engine)
        if nbytes:
            self.senders[conn.id].app_send(nbytes)
        done.fire()
        return done

    def set_tsq(self, conn, enabled: bool) -> None:
        # TCP small queues are always part of the conventional stack; the
        # knob only changes behaviour on the pooled-fabric side.
        pass

    def on_frame(self, frame: Frame) -> None:
        self._inbox.append(frame)
        self._inbox_work.fire()

    def _inbox_loop(self):
        while True:
            if not self._inbox:
                yield self._inbox_work
                continue
            frame = self._inbox.popleft()
            yield from self.cpu.busy(self.params.stack_ns)
            if frame.kind == "ack":
                sender = self.senders.get(frame.conn_id)
                if sender is not None:
                    sender.on_ack(frame.seq)
            else:
                receiver = self.receivers.get(frame.conn_id)
                if receiver is None:
                    self.engine.metrics.count("unknown_connection_frames")
                    continue
                yield self.cpu.acquire()
                yield from receiver.on_data(frame)
                self.cpu.release()
