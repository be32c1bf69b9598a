"""Assemble a runnable system (pooled-fabric rack or ToR baseline) from a
validated configuration.  Both systems expose the same facade to workloads:
``hosts[cn].send(conn, nbytes)`` plus ``conn.delivered_to(cn)`` watermarks.
"""

from __future__ import annotations

from typing import Optional

from . import tor_baseline
from .dram_cache import CacheDirectory, CacheTiming, DramCache
from .fabric import (
    AccessWindow,
    BandwidthShare,
    CxlPort,
    EthernetLink,
    FluidNet,
    LatencyProfile,
    LinkSpec,
    MemoryDevice,
)
from .intra_transport import (
    AsicDataplane,
    Connection,
    Descriptor,
    DFabricHost,
    TransportParams,
)
from .mem_pool import MemoryPool
from .nic_pool import NicPool, NicPoolParams, SubflowPacer
from .sim_core import Engine, EventKind

MIB = 1024 * 1024


class InvariantViolation(Exception):
    """End-of-run consistency check failed (leak, accounting, ...)."""


def transport_params(cfg: dict) -> TransportParams:
    tp = cfg["transport"]
    return TransportParams(
        mtu=tp["mtu"],
        poll_period_ns=int(tp["poll_period_us"] * 1000),
        batch=tp["batch"],
        vq_capacity=tp["vq_capacity"],
        fill_depth=tp["fill_depth"],
        tsq_enabled=tp["tsq_enabled"],
        tsq_limit=tp["tsq_limit"],
        concurrent_txq_polling=tp["concurrent_txq_polling"],
        txq_op_ns=tp["txq_op_ns"],
        rxq_op_ns=tp["rxq_op_ns"],
        local_q_op_ns=tp["local_q_op_ns"],
        interrupt_ns=tp["interrupt_ns"],
        interrupt_delay_ns=int(tp["interrupt_delay_us"] * 1000),
        free_op_ns=tp["free_op_ns"],
        ack_delay_ns=int(tp["ack_delay_us"] * 1000),
        initial_cwnd=tp["initial_cwnd"],
    )


class _Rack:
    def __init__(self, rack_id: int):
        self.id = rack_id
        self.devices: list[MemoryDevice] = []
        self.pool: Optional[MemoryPool] = None
        self.directory: Optional[CacheDirectory] = None
        self.nic_pool: Optional[NicPool] = None
        self.cn_links: dict[int, BandwidthShare] = {}
        self.cn_ids: list[int] = []


class _CompletionRouter:
    """Routes NIC completion descriptors into destination RxQs."""

    def __init__(self, system: "DFabricSystem", rack: _Rack):
        self.system = system
        self.rack = rack

    def _rxq_for(self, pkt):
        host = self.system.hosts[pkt.d.dst]
        qidx = 1 + pkt.d.subflow % host.n_subflow_queues
        return host, host.rxqs[qidx]

    def try_reserve(self, pkt) -> bool:
        _host, rxq = self._rxq_for(pkt)
        if rxq.full():
            return False
        rxq.reserve()
        return True

    def land(self, pkt, buf) -> None:
        host, rxq = self._rxq_for(pkt)
        d = pkt.d
        self.rack.pool.grant(buf, self.system.lppu_node(self.rack.id), d.dst)
        rxq.commit(Descriptor(d.src, d.dst, buf, d.length, d.conn_id,
                              d.subflow, d.offset))
        self.system.engine.after(
            self.system.params.interrupt_ns, EventKind.INTERRUPT,
            host.interrupt.fire)


class DFabricSystem:
    """Dual-rack (or single-rack) pooled-fabric system."""

    def __init__(self, cfg: dict, engine: Optional[Engine] = None):
        self.cfg = cfg
        self.engine = engine or Engine(seed=cfg["seed"])
        self.fluid = FluidNet(self.engine)
        fab = cfg["fabric"]
        self.params = transport_params(cfg)
        self.profile = LatencyProfile(fab["local_base_ns"], fab["remote_base_ns"])
        self.n_racks = fab["racks"]
        self.cns_per_rack = fab["cns_per_rack"]
        self.total_cns = self.n_racks * self.cns_per_rack
        self.hosts: dict[int, DFabricHost] = {}
        self.racks: list[_Rack] = []
        self._conn_seq = 0
        self.conns: list[Connection] = []

        c = int(fab["cxl_max_throughput"])
        hop_ns = int(fab["network_hop_us"] * 1000)
        npool_cfg = cfg["nic_pool"]
        nic_params = NicPoolParams(
            phq_depth=npool_cfg["phq_depth"],
            rx_post_target=npool_cfg["rx_post_per_nic"],
            dma_depth=npool_cfg["dma_depth"],
            sched_epoch_ns=int(npool_cfg["sched_epoch_us"] * 1000),
            phq_op_ns=cfg["transport"]["phq_op_ns"],
            poll_period_ns=self.params.poll_period_ns,
            batch=self.params.batch,
            rxq_op_ns=self.params.rxq_op_ns,
            interrupt_ns=self.params.interrupt_ns,
            remote_base_ns=self.profile.remote_base,
            mtu=self.params.mtu,
        )

        dev_seq = 0
        for r in range(self.n_racks):
            rack = _Rack(r)
            rack.cn_ids = [r * self.cns_per_rack + i
                           for i in range(self.cns_per_rack)]
            local_cursor = 0
            for spec in cfg["mem_pool"]["devices"]:
                if spec["location"] == "cn-local":
                    cn = rack.cn_ids[local_cursor]
                    local_cursor += 1
                    dev = MemoryDevice(dev_seq, spec["capacity_mib"] * MIB,
                                       spec["bandwidth"], "cn-local", cn_id=cn)
                else:
                    dev = MemoryDevice(dev_seq, spec["capacity_mib"] * MIB,
                                       spec["bandwidth"], "fabric-attached")
                rack.devices.append(dev)
                dev_seq += 1
            node_ids = rack.cn_ids + [self.lppu_node(r)]
            rack.pool = MemoryPool(rack.devices, node_ids)
            rack.directory = CacheDirectory()
            self.racks.append(rack)

            for cn in rack.cn_ids:
                link_in = BandwidthShare(f"cn{cn}-link-in", c)
                link_out = BandwidthShare(f"cn{cn}-link-out", c)
                rack.cn_links[cn] = (link_in, link_out)
                win = (fab["window"][cn] if isinstance(fab["window"], list)
                       else fab["window"])
                port = CxlPort(self.engine, self.fluid, cn, link_in, link_out,
                               self.profile, AccessWindow(max_outstanding=win))
                cache_dev = MemoryDevice(10_000 + cn, 16 * 1024 * MIB,
                                         64 * c, "cn-local", cn_id=cn)
                timing = self._cache_timing(rack, port, cache_dev)
                cache = DramCache(
                    self.engine, cn, rack.pool,
                    cfg["cache"]["capacity_mib"] * MIB, cfg["cache"]["ways"],
                    timing, rack.directory, enabled=cfg["cache"]["enabled"])
                for region in rack.pool.regions:
                    cache.configure_region(region, True,
                                           cfg["cache"]["granularity"])
                host = DFabricHost(
                    self.engine, cn, r, rack.pool, cache, self.params,
                    n_subflow_queues=npool_cfg["subflows_per_flow"],
                    pool_read=self._pool_reader(rack, port),
                    pool_write=self._pool_reader(rack, port))
                self.hosts[cn] = host

            rx_devs = [d.id for d in rack.devices
                       if d.location == "fabric-attached"
                       or cfg["mem_pool"]["rx_buffer_placement"] == "all"]
            def link_of(cn_id, direction, rk=rack):
                pair = rk.cn_links.get(cn_id)
                if pair is None:
                    return None
                return pair[0] if direction == "in" else pair[1]

            rack.nic_pool = NicPool(
                self.engine, r, self.fluid, rack.pool,
                npool_cfg["nic_bandwidths"], nic_params, self.lppu_node(r),
                rack.directory, cn_link_of=link_of, rx_device_ids=rx_devs)

        # inter-rack trunks: one serialised link per direction
        if self.n_racks == 2:
            trunk_bw = npool_cfg["uplinks"] * npool_cfg["bandwidth_per_nic"]
            spec = LinkSpec(trunk_bw, hop_ns, "ethernet-link")
            t01 = EthernetLink(self.engine, spec, self.params.mtu, "trunk01")
            t10 = EthernetLink(self.engine, spec, self.params.mtu, "trunk10")
            self.racks[0].nic_pool.trunk_out = t01
            self.racks[1].nic_pool.trunk_out = t10
            self.racks[0].nic_pool.remote = self.racks[1].nic_pool
            self.racks[1].nic_pool.remote = self.racks[0].nic_pool

        for rack in self.racks:
            rack.nic_pool.router = _CompletionRouter(self, rack)
            rack.nic_pool.post_receive_buffers(
                nic_params.rx_post_target * len(rack.nic_pool.nics))
            rack.nic_pool.start()
            for cn in rack.cn_ids:
                AsicDataplane(
                    self.engine, self.hosts[cn], self.params, self.hosts,
                    rack.nic_pool,
                    grant=lambda d, rk=rack: rk.pool.grant(d.ref, d.src, d.dst))

    # -- wiring helpers -----------------------------------------------------

    def lppu_node(self, rack_id: int) -> int:
        return -(rack_id + 1)

    def _cache_timing(self, rack: _Rack, port: CxlPort,
                      cache_dev: MemoryDevice) -> CacheTiming:
        fluid = self.fluid
        pool = rack.pool
        remote_base = self.profile.remote_base

        def pool_access(ref, nbytes, direction):
            return port.loadstore(pool.device_of(ref), nbytes, direction)

        def transfer(direction):
            def run(ref, nbytes):
                dev = pool.device_of(ref)
                resources = [dev.read_share if direction == "in"
                             else dev.write_share]
                if not dev.is_local_to(port.cn_id):
                    resources.append(port.link(direction))
                return fluid.start(nbytes, resources, startup_ns=remote_base)

            return run

        return CacheTiming(
            local_read=lambda nbytes: port.loadstore(cache_dev, nbytes),
            pool_access=pool_access,
            fill=transfer("in"),
            writeback=transfer("out"),
        )

    def _pool_reader(self, rack: _Rack, port: CxlPort):
        pool = rack.pool

        def read(ref, nbytes):
            return port.loadstore(pool.device_of(ref), nbytes, "in")

        return read

    def rack_of(self, cn: int) -> int:
        return cn // self.cns_per_rack

    # -- facade ---------------------------------------------------------------

    def connect(self, a: int, b: int) -> Connection:
        inter = self.rack_of(a) != self.rack_of(b)
        self._conn_seq += 1
        n_sub = self.cfg["nic_pool"]["subflows_per_flow"] if inter else 1
        conn = Connection(self.engine, self._conn_seq, a, b, inter,
                          tsq_enabled=self.params.tsq_enabled,
                          tsq_limit=self.params.tsq_limit, n_subflows=n_sub)
        if inter:
            for side in (a, b):
                conn.pacers[side] = [
                    SubflowPacer(self.engine, conn.credit,
                                 self.params.ack_delay_ns,
                                 self.params.initial_cwnd)
                    for _ in range(n_sub)
                ]
        self.hosts[a].open_connection(conn)
        self.hosts[b].open_connection(conn)
        self.conns.append(conn)
        return conn

    def finish_checks(self) -> list[str]:
        problems = []
        for rack in self.racks:
            try:
                rack.pool.check_accounting()
            except AssertionError as exc:
                problems.append(str(exc))
            posted = set()
            for nic in rack.nic_pool.nics:
                posted.update(ref.addr for ref in nic.rx_posted)
            leaked = [ref for ref in rack.pool.live_refs()
                      if ref.addr not in posted]
            if leaked:
                problems.append(
                    f"rack {rack.id}: {len(leaked)} leaked buffers "
                    f"(first at {leaked[0].addr})")
        for conn in self.conns:
            for side in (conn.a, conn.b):
                st = conn.streams[side]
                if st.resequencer.buffered:
                    problems.append(
                        f"conn {conn.id}: {len(st.resequencer.buffered)} "
                        f"segments stuck in the resequencer")
        return problems

    @property
    def leaked_buffer_count(self) -> int:
        total = 0
        for rack in self.racks:
            posted = set()
            for nic in rack.nic_pool.nics:
                posted.update(ref.addr for ref in nic.rx_posted)
            total += sum(1 for ref in rack.pool.live_refs()
                         if ref.addr not in posted)
        return total


class BaselineSystem:
    """Dual-rack ToR system with the same workload facade."""

    def __init__(self, cfg: dict, engine: Optional[Engine] = None):
        self.cfg = cfg
        self.engine = engine or Engine(seed=cfg["seed"])
        fab = cfg["fabric"]
        self.n_racks = fab["racks"]
        self.cns_per_rack = fab["cns_per_rack"]
        self.total_cns = self.n_racks * self.cns_per_rack
        b = cfg["baseline"]
        self.params = tor_baseline.BaselineParams(
            nic_bandwidth=b["nic_bandwidth"],
            mtu=cfg["transport"]["mtu"],
            uplinks=b["uplinks"],
            port_buffer_bytes=b["port_buffer_bytes"],
            hop_ns=int(fab["network_hop_us"] * 1000),
            min_rto_ns=int(b["min_rto_us"] * 1000),
            initial_cwnd=b["initial_cwnd"],
            memcpy_bps=b["memcpy_bytes_per_s"],
            stack_ns=b["stack_ns"],
        )
        self.hosts: dict[int, tor_baseline.BaselineHost] = {}
        self.switches: list[tor_baseline.TorSwitch] = []
        self._conn_seq = 0
        self.conns: list[Connection] = []

        for r in range(self.n_racks):
            cn_ids = [r * self.cns_per_rack + i
                      for i in range(self.cns_per_rack)]
            switch = tor_baseline.TorSwitch(
                self.engine, r, self.params, cn_ids,
                deliver_to_host=lambda cn, f: self.hosts[cn].on_frame(f),
                deliver_to_peer=lambda f, rk=r: self._to_peer(rk, f))
            self.switches.append(switch)
            for cn in cn_ids:
                self.hosts[cn] = tor_baseline.BaselineHost(
                    self.engine, cn, r, self.params,
                    send_to_tor=lambda f, rk=r: self.switches[rk].ingress(f))

    def _to_peer(self, rack_id: int, frame) -> None:
        peer = self.switches[1 - rack_id]
        peer.ingress_from_peer(frame)

    def rack_of(self, cn: int) -> int:
        return cn // self.cns_per_rack

    def connect(self, a: int, b: int) -> Connection:
        self._conn_seq += 1
        conn = Connection(self.engine, self._conn_seq, a, b,
                          self.rack_of(a) != self.rack_of(b))
        self.hosts[a].open_connection(conn)
        self.hosts[b].open_connection(conn)
        self.conns.append(conn)
        return conn

    def finish_checks(self) -> list[str]:
        problems = []
        for cn, host in self.hosts.items():
            for conn_id, sender in host.senders.items():
                if not sender.all_acked:
                    problems.append(
                        f"cn {cn} conn {conn_id}: "
                        f"{sender.target - sender.snd_una} bytes unacked")
        return problems


def build_system(cfg: dict, engine: Optional[Engine] = None):
    if cfg["system"] == "dfabric":
        return DFabricSystem(cfg, engine)
    return BaselineSystem(cfg, engine)
