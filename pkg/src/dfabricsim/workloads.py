"""Synthetic traffic generators: collective patterns (ring allreduce,
all-to-all, gather, broadcast), shuffle incast, ping-pong, and a closed-loop
key-value benchmark.  All run unchanged on either system through the common
connection facade; compute phases are fixed delays.
"""

from __future__ import annotations

import random
from typing import Optional

from .sim_core import Completion, Engine, EventKind


class WorkloadResult:
    """Per-superstep communication windows plus the analytic traffic volume."""

    def __init__(self, supersteps: int):
        self.spans: list[list[Optional[int]]] = [[None, None]
                                                 for _ in range(supersteps)]
        self.expected_volume = 0
        self.description = ""

    def mark_start(self, ss: int, t: int) -> None:
        lo = self.spans[ss][0]
        if lo is None or t < lo:
            self.spans[ss][0] = t

    def mark_end(self, ss: int, t: int) -> None:
        hi = self.spans[ss][1]
        if hi is None or t > hi:
            self.spans[ss][1] = t

    @property
    def superstep_times_ns(self) -> list[int]:
        return [(hi - lo) for lo, hi in self.spans
                if lo is not None and hi is not None]

    @property
    def comm_time_ns(self) -> int:
        return sum(self.superstep_times_ns)

    @property
    def completed(self) -> bool:
        return all(hi is not None for _lo, hi in self.spans)


class _Barrier:
    def __init__(self, engine: Engine, n: int):
        self._engine = engine
        self.n = n
        self.count = 0
        self.done = Completion(engine)

    def arrive(self) -> Completion:
        self.count += 1
        if self.count == self.n:
            self.done.fire()
        return self.done


def ring_optimal_time_ns(n: int, payload_bytes: int, bottleneck_bps: int) -> float:
    """Closed-form optimum: 2(N-1) steps moving payload/N each at full rate."""
    chunk = payload_bytes / n
    return 2 * (n - 1) * chunk * 1e9 / bottleneck_bps


def expected_volume(wl: dict, n_participants: int) -> int:
    kind = wl["kind"]
    s = wl["payload_bytes"]
    ss = wl["supersteps"]
    n = n_participants
    if kind == "ring_allreduce":
        return ss * n * 2 * (n - 1) * (s // n)
    if kind in ("gather", "broadcast"):
        return ss * (n - 1) * s
    if kind == "all_to_all":
        return ss * n * (n - 1) * s
    if kind == "shuffle":
        return ss * wl["mappers"] * s
    if kind == "pingpong":
        return wl["iters"] * 2 * max(1, wl["msg_size"])
    if kind == "kv":
        reqs, resps = _kv_schedule_volume(wl)
        return reqs + resps
    raise ValueError(kind)


def _kv_ops(wl: dict, client: int) -> list[tuple[int, bool]]:
    """Deterministic (server_index, is_get) schedule for one client."""
    rng = random.Random(1_000_003 * (client + 1))
    return [(rng.randrange(wl["servers"]), rng.random() < wl["get_fraction"])
            for _ in range(wl["ops"])]


def _kv_schedule_volume(wl: dict) -> tuple[int, int]:
    req = resp = 0
    for c in range(wl["clients"]):
        for _srv, is_get in _kv_ops(wl, c):
            req += wl["key_bytes"] + (0 if is_get else wl["value_bytes"])
            resp += wl["value_bytes"] if is_get else 64
    return req, resp


class WorkloadRun:
    def __init__(self, system, wl: dict):
        self.system = system
        self.wl = wl
        engine = system.engine
        total = system.total_cns
        parts = wl["participants"]
        self.participants = list(parts) if parts is not None else list(range(total))
        self.result = WorkloadResult(wl["supersteps"]
                                     if wl["kind"] not in ("pingpong", "kv")
                                     else 1)
        self.result.expected_volume = expected_volume(wl, len(self.participants))
        self.compute_ns = int(wl["compute_delay_us"] * 1000)
        kind = wl["kind"]
        spawner = {
            "ring_allreduce": self._spawn_ring,
            "gather": self._spawn_gather,
            "broadcast": self._spawn_broadcast,
            "all_to_all": self._spawn_all_to_all,
            "shuffle": self._spawn_shuffle,
            "pingpong": self._spawn_pingpong,
            "kv": self._spawn_kv,
        }[kind]
        self.result.description = kind
        spawner(engine)

    # -- collectives --------------------------------------------------------

    def _spawn_ring(self, engine: Engine) -> None:
        wl, parts = self.wl, self.participants
        n = len(parts)
        chunk = wl["payload_bytes"] // n
        supersteps = wl["supersteps"]
        conns = {}
        for i, me in enumerate(parts):
            right = parts[(i + 1) % n]
            conns[me] = self.system.connect(me, right)
        barriers = [_Barrier(engine, n) for _ in range(supersteps)]

        def node(i: int):
            me = parts[i]
            left = parts[(i - 1) % n]
            out_conn = conns[me]
            in_conn = conns[left]
            recv_target = 0
            host = self.system.hosts[me]
            for ss in range(supersteps):
                if self.compute_ns:
                    yield engine.sleep(self.compute_ns)
                self.result.mark_start(ss, engine.now)
                for _step in range(2 * (n - 1)):
                    host.send(out_conn, chunk)
                    recv_target += chunk
                    yield in_conn.delivered_to(me).wait_for(recv_target)
                self.result.mark_end(ss, engine.now)
                yield barriers[ss].arrive()

        for i in range(n):
            engine.spawn(node(i), EventKind.WORKLOAD_STEP)

    def _spawn_fan(self, engine: Engine, senders: list[int], receivers,
                   per_pair: int) -> None:
        """Shared machinery: every sender sends per_pair bytes to each of its
        receivers per superstep, with a BSP barrier between supersteps."""
        wl = self.wl
        supersteps = wl["supersteps"]
        pairs = [(s, r) for s in senders for r in receivers(s)]
        conns = {pair: self.system.connect(*pair) for pair in pairs}
        nodes = sorted({p for pair in pairs for p in pair})
        barriers = [_Barrier(engine, len(nodes)) for _ in range(supersteps)]

        def node(me: int):
            host = self.system.hosts[me]
            outs = [conns[p] for p in pairs if p[0] == me]
            ins = [conns[p] for p in pairs if p[1] == me]
            for ss in range(supersteps):
                if self.compute_ns:
                    yield engine.sleep(self.compute_ns)
                self.result.mark_start(ss, engine.now)
                for conn in outs:
                    host.send(conn, per_pair)
                target = (ss + 1) * per_pair
                for conn in ins:
                    yield conn.delivered_to(me).wait_for(target)
                for conn in outs:  # BSP: own deliveries must land too
                    yield conn.delivered_to(conn.other(me)).wait_for(target)
                self.result.mark_end(ss, engine.now)
                yield barriers[ss].arrive()

        for me in nodes:
            engine.spawn(node(me), EventKind.WORKLOAD_STEP)

    def _spawn_gather(self, engine: Engine) -> None:
        root, rest = self.participants[0], self.participants[1:]
        self._spawn_fan(engine, rest, lambda _s: [root],
                        self.wl["payload_bytes"])

    def _spawn_broadcast(self, engine: Engine) -> None:
        root, rest = self.participants[0], self.participants[1:]
        self._spawn_fan(engine, [root], lambda _s: rest,
                        self.wl["payload_bytes"])

    def _spawn_all_to_all(self, engine: Engine) -> None:
        parts = self.participants
        self._spawn_fan(engine, parts, lambda s: [p for p in parts if p != s],
                        self.wl["payload_bytes"])

    def _spawn_shuffle(self, engine: Engine) -> None:
        reducer = self.participants[0]
        mappers = self.participants[1:1 + self.wl["mappers"]]
        if len(mappers) < self.wl["mappers"]:
            raise ValueError("not enough participants for the mapper count")
        self._spawn_fan(engine, mappers, lambda _s: [reducer],
                        self.wl["payload_bytes"])

    # -- latency workloads ----------------------------------------------------

    def _spawn_pingpong(self, engine: Engine) -> None:
        wl = self.wl
        a, b = self.participants[0], self.participants[1]
        msg = max(1, wl["msg_size"])
        iters = wl["iters"]
        conn = self.system.connect(a, b)
        metrics = engine.metrics

        def initiator():
            host = self.system.hosts[a]
            self.result.mark_start(0, engine.now)
            for it in range(iters):
                t0 = engine.now
                host.send(conn, msg)
                yield conn.delivered_to(a).wait_for((it + 1) * msg)
                metrics.record_latency("pingpong", engine.now - t0)
            self.result.mark_end(0, engine.now)

        def responder():
            host = self.system.hosts[b]
            for it in range(iters):
                yield conn.delivered_to(b).wait_for((it + 1) * msg)
                host.send(conn, msg)

        engine.spawn(initiator(), EventKind.WORKLOAD_STEP)
        engine.spawn(responder(), EventKind.WORKLOAD_STEP)

    def _spawn_kv(self, engine: Engine) -> None:
        wl = self.wl
        clients = self.participants[:wl["clients"]]
        servers = self.participants[wl["clients"]:wl["clients"] + wl["servers"]]
        if len(servers) < wl["servers"]:
            raise ValueError("not enough participants for clients+servers")
        metrics = engine.metrics
        self.result.mark_start(0, engine.now)
        finished = [0]

        def req_size(is_get: bool) -> int:
            return wl["key_bytes"] + (0 if is_get else wl["value_bytes"])

        def resp_size(is_get: bool) -> int:
            return wl["value_bytes"] if is_get else 64

        for ci, cn in enumerate(clients):
            ops = _kv_ops(wl, ci)
            conns = {s: self.system.connect(cn, srv)
                     for s, srv in enumerate(servers)}

            def client(cn=cn, ops=ops, conns=conns, ci=ci):
                host = self.system.hosts[cn]
                sent_req = dict.fromkeys(conns, 0)
                got_resp = dict.fromkeys(conns, 0)
                for srv_idx, is_get in ops:
                    t0 = engine.now
                    conn = conns[srv_idx]
                    host.send(conn, req_size(is_get))
                    sent_req[srv_idx] += req_size(is_get)
                    got_resp[srv_idx] += resp_size(is_get)
                    yield conn.delivered_to(cn).wait_for(got_resp[srv_idx])
                    metrics.record_latency(f"kv-c{ci}", engine.now - t0)
                finished[0] += 1
                if finished[0] == len(clients):
                    self.result.mark_end(0, engine.now)

            def server(srv_idx: int, cn=cn, ops=ops, conns=conns):
                conn = conns[srv_idx]
                srv = conn.other(cn)
                host = self.system.hosts[srv]
                got = 0
                for s, is_get in ops:
                    if s != srv_idx:
                        continue
                    got += req_size(is_get)
                    yield conn.delivered_to(srv).wait_for(got)
                    host.send(conn, resp_size(is_get))

            engine.spawn(client(), EventKind.WORKLOAD_STEP)
            for s in range(len(servers)):
                engine.spawn(server(s), EventKind.WORKLOAD_STEP)
