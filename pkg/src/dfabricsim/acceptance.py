"""Acceptance criteria A1-A9: analytical oracles, invariant suites, and
directional trend checks with stated tolerances.

Every criterion builds its experiment configs programmatically, runs them,
and returns a CriterionResult; the CLI ``validate`` subcommand and the
pytest acceptance module both call ``run_criteria``.
"""

from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass

from .builder import build_system
from .config import validate_config
from .fabric import (
    AccessWindow,
    BandwidthShare,
    CxlPort,
    FluidNet,
    LatencyProfile,
    MemoryDevice,
)
from .runner import run_experiment
from .sim_core import Engine, EventKind
from .workloads import ring_optimal_time_ns

MIB = 1024 * 1024


@dataclass
class CriterionResult:
    cid: str
    passed: bool
    details: str


def _run(raw: dict, **kwargs):
    return run_experiment(validate_config(raw), figures=False, **kwargs)


# ---------------------------------------------------------------------------
# A1: motivation trend, dual racks, ring allreduce at theta=10
# ---------------------------------------------------------------------------

def check_a1() -> CriterionResult:
    c = 150_000_000
    s = 8 * MIB
    base = {
        "seed": 11,
        "fabric": {"cxl_max_throughput": c, "theta": 10},
        "nic_pool": {"added_nics": 8},  # 10-NIC pool with N=2
        "workload": {"kind": "ring_allreduce", "payload_bytes": s},
    }
    opt_ms = ring_optimal_time_ns(4, s, c) / 1e6

    dfab = dict(base, system="dfabric")
    t_dfab = _run(dfab).report["summary"]["comm_time_ms"]

    memcap = dict(base, system="dfabric")
    pool_capacity = 10 * c // 10  # (N+M) * C/theta
    capped = pool_capacity // 2
    memcap["mem_pool"] = {"devices": [
        {"capacity_mib": 16384, "bandwidth": 4 * c, "location": "cn-local"},
        {"capacity_mib": 16384, "bandwidth": 4 * c, "location": "cn-local"},
        {"capacity_mib": 16384, "bandwidth": capped,
         "location": "fabric-attached"},
    ]}
    t_memcap = _run(memcap).report["summary"]["comm_time_ms"]

    basel = dict(base, system="tor_baseline")
    t_base = _run(basel).report["summary"]["comm_time_ms"]

    r_base = t_base / opt_ms
    r_dfab = t_dfab / opt_ms
    r_memcap = t_memcap / t_dfab
    passed = r_base >= 8.0 and r_dfab <= 1.3 and r_memcap >= 1.8
    return CriterionResult(
        "A1", passed,
        f"baseline/opt={r_base:.2f} (>=8), dfabric/opt={r_dfab:.3f} (<=1.3), "
        f"memcap/dfabric={r_memcap:.2f} (>=1.8)")


# ---------------------------------------------------------------------------
# A2: shuffle incast 3->1 at theta=8
# ---------------------------------------------------------------------------

def check_a2() -> CriterionResult:
    c = 200_000_000
    base = {
        "seed": 5,
        "fabric": {"cxl_max_throughput": c, "theta": 8},
        "nic_pool": {"added_nics": 2},
        "workload": {"kind": "shuffle", "payload_bytes": 2 * MIB,
                     "mappers": 3, "participants": [0, 1, 2, 3]},
    }
    rd = _run(dict(base, system="dfabric")).report["summary"]
    rb = _run(dict(base, system="tor_baseline")).report["summary"]
    t_ratio = rb["comm_time_ms"] / rd["comm_time_ms"]
    passed = (rd["drops"] == 0 and rd["rx_underflow"] == 0
              and rb["drops"] > 0 and t_ratio >= 1.6)
    return CriterionResult(
        "A2", passed,
        f"dfabric drops={rd['drops']}/underflow={rd['rx_underflow']} (=0), "
        f"baseline drops={rb['drops']} (>0), "
        f"baseline/dfabric time={t_ratio:.2f} (>=1.6)")


# ---------------------------------------------------------------------------
# A3: NIC scaling, gather bandwidth vs M
# ---------------------------------------------------------------------------

def check_a3() -> CriterionResult:
    c = 430_000_000
    s = 3 * MIB
    bws = {}
    for m in (0, 1, 2, 4, 8):
        raw = {
            "system": "dfabric", "seed": 9,
            "fabric": {"cxl_max_throughput": c, "theta": 10},
            "nic_pool": {"added_nics": m},
            "workload": {"kind": "gather", "payload_bytes": s,
                         "participants": [0, 1, 2, 3]},
        }
        summary = _run(raw).report["summary"]
        bws[m] = summary["goodput_mbytes_per_s"]
    ms = [0, 1, 2, 4, 8]
    non_decreasing = all(bws[ms[i + 1]] >= bws[ms[i]]
                         for i in range(len(ms) - 1))
    doubling = bws[8] >= 2.0 * bws[0]
    saturating = (bws[8] - bws[4]) < (bws[1] - bws[0])
    passed = non_decreasing and doubling and saturating
    detail = ", ".join(f"M={m}:{bws[m]:.0f}" for m in ms)
    return CriterionResult(
        "A3", passed,
        f"gather MB/s [{detail}] non-decr={non_decreasing}, "
        f"M8/M0={bws[8] / bws[0]:.2f} (>=2), saturating={saturating}")


# ---------------------------------------------------------------------------
# A4: bottleneck law on random configs
# ---------------------------------------------------------------------------

def check_a4(n_configs: int = 20) -> CriterionResult:
    rng = random.Random(424242)
    failures = []
    for trial in range(n_configs):
        b = rng.randrange(20, 120) * 1_000_000
        m = rng.choice([0, 1, 2, 4])
        n_nics = 2 + m
        uplinks = rng.randrange(max(1, n_nics - 2), n_nics + 1)
        fabric_bw = int(n_nics * b * rng.uniform(0.4, 1.6))
        local_bw = int(n_nics * b * rng.uniform(0.5, 2.0))
        raw = {
            "system": "dfabric", "seed": 1000 + trial,
            "fabric": {"cxl_max_throughput": 2_000_000_000, "theta": 1},
            "nic_pool": {"added_nics": m, "bandwidth_per_nic": b,
                         "uplinks": uplinks},
            "mem_pool": {"devices": [
                {"capacity_mib": 4096, "bandwidth": local_bw,
                 "location": "cn-local"},
                {"capacity_mib": 4096, "bandwidth": local_bw,
                 "location": "cn-local"},
                {"capacity_mib": 4096, "bandwidth": fabric_bw,
                 "location": "fabric-attached"},
            ]},
            "workload": {"kind": "gather", "payload_bytes": 3 * MIB,
                         "participants": [0, 2, 3]},
        }
        res = _run(raw)
        # both senders sit in rack 1; their buffers live on their two
        # cn-local devices, receive buffers on rack 0's fabric device
        bound = min(n_nics * b, uplinks * b, 2 * local_bw, fabric_bw)
        bound_per_ms = bound / 1000.0
        slack = n_nics * 4 * 4096  # DMA completions straddling a window edge
        windows = [(t, v) for t, metric, v in res.ts_rows
                   if metric == "pool_ingress_bytes"]
        if not windows:
            failures.append(f"trial {trial}: no ingress windows")
            continue
        over = [v for _t, v in windows if v > bound_per_ms * 1.02 + slack]
        if over:
            failures.append(
                f"trial {trial}: window {max(over):.0f} B exceeds "
                f"bound {bound_per_ms:.0f} B/ms")
        active = [v for _t, v in windows]
        lo = len(active) // 5
        hi = len(active) - max(1, len(active) // 5)
        steady = active[lo:hi] or active
        mean = sum(steady) / len(steady)
        if mean < 0.9 * bound_per_ms:
            failures.append(
                f"trial {trial}: steady {mean:.0f} B/ms short of "
                f"0.9x bound {bound_per_ms:.0f}")
        summ = res.report["summary"]
        if summ["drops"] or summ["rx_underflow"]:
            failures.append(f"trial {trial}: drops/underflow nonzero")
    return CriterionResult(
        "A4", not failures,
        f"{n_configs} random configs within the min-capacity bound"
        + ("" if not failures else f"; FAIL: {failures[:3]}"))


# ---------------------------------------------------------------------------
# A5: load/store window model closed form
# ---------------------------------------------------------------------------

def check_a5() -> CriterionResult:
    checks = []
    for window in (1, 8, 64):
        eng = Engine()
        fluid = FluidNet(eng)
        port = CxlPort(eng, fluid, 0,
                       BandwidthShare("in", 10 ** 12),
                       BandwidthShare("out", 10 ** 12),
                       LatencyProfile(), AccessWindow(window))
        dev = MemoryDevice(1, 1024 * MIB, 10 ** 12, "fabric-attached")
        total = 4 * MIB
        done = {}
        port.loadstore(dev, total).subscribe(
            lambda _v, d=done: d.setdefault("t", eng.now))
        eng.run_until(None)
        measured = total / (done["t"] / 1e9)
        expected = window * 64 / (13_000 / 1e9)
        checks.append(abs(measured - expected) / expected < 0.02)

    def one_line_rtt(local: bool) -> int:
        eng = Engine()
        fluid = FluidNet(eng)
        port = CxlPort(eng, fluid, 0, BandwidthShare("in", 10 ** 12),
                       BandwidthShare("out", 10 ** 12),
                       LatencyProfile(), AccessWindow(8))
        if local:
            dev = MemoryDevice(1, 1024 * MIB, 10 ** 12, "cn-local", cn_id=0)
        else:
            dev = MemoryDevice(1, 1024 * MIB, 10 ** 12, "fabric-attached")
        done = {}
        port.loadstore(dev, 64).subscribe(
            lambda _v, d=done: d.setdefault("t", eng.now))
        eng.run_until(None)
        return done["t"]

    ratio = one_line_rtt(local=False) / one_line_rtt(local=True)
    passed = all(checks) and ratio == 10.0
    return CriterionResult(
        "A5", passed,
        f"window {{1,8,64}} throughput within 2% of closed form: {checks}, "
        f"remote:local RTT ratio={ratio:.1f} (=10 exactly)")


# ---------------------------------------------------------------------------
# A6: ablations on a receive-heavy workload
# ---------------------------------------------------------------------------

def check_a6() -> CriterionResult:
    base = {
        "system": "dfabric", "seed": 21,
        "fabric": {"cxl_max_throughput": 600_000_000, "theta": 4,
                   "window": 16},
        "nic_pool": {"added_nics": 2},
        "workload": {"kind": "gather", "payload_bytes": 24 * MIB,
                     "participants": [0, 2]},
    }

    def tput(extra: dict) -> float:
        import copy
        raw = copy.deepcopy(base)
        for section, overrides in extra.items():
            if isinstance(overrides, dict):
                raw.setdefault(section, {}).update(overrides)
            else:
                raw[section] = overrides
        s = _run(raw).report["summary"]
        return s["goodput_mbytes_per_s"]

    full = tput({})
    no_cache = tput({"cache": {"enabled": False}})
    tsq_on = tput({"transport": {"tsq_enabled": True}})
    serial_poll = tput({"transport": {"concurrent_txq_polling": False}})
    r_cache = no_cache / full
    r_tsq = tsq_on / full
    r_poll = serial_poll / full
    passed = (r_cache <= 0.35 and r_tsq <= 0.8 and r_poll <= 0.9
              and r_cache < r_tsq < r_poll)
    return CriterionResult(
        "A6", passed,
        f"full={full:.0f} MB/s; cache-off={r_cache:.2f} (<=0.35), "
        f"tsq-on={r_tsq:.2f} (<=0.8), serial-poll={r_poll:.2f} (<=0.9), "
        f"order cache<tsq<poll={r_cache < r_tsq < r_poll}")


# ---------------------------------------------------------------------------
# A7: stream integrity over heterogeneous subflows
# ---------------------------------------------------------------------------

def _stream_bytes(conn_id: int, offset: int, length: int) -> bytes:
    out = bytearray()
    block = offset // 256
    while len(out) < length:
        seed = f"{conn_id}:{block}".encode()
        out.extend(hashlib.blake2b(seed, digest_size=32).digest() * 8)
        block += 1
    start = offset % 256
    return bytes(out[start:start + length])


def check_a7(n_flows: int = 1000) -> CriterionResult:
    b = 120_000_000
    raw = {
        "system": "dfabric", "seed": 77,
        "fabric": {"cxl_max_throughput": 2_000_000_000, "theta": 1},
        "nic_pool": {"added_nics": 2, "subflows_per_flow": 4,
                     "nic_bandwidths": [b, b // 2, b // 2, b],
                     "rx_post_per_nic": 128},
        "workload": {"kind": "pingpong", "msg_size": 64, "iters": 1,
                     "participants": [0, 2]},
    }
    cfg = validate_config(raw)
    system = build_system(cfg)
    engine = system.engine
    trace = []
    engine.trace = trace.append
    rng = random.Random(4242)
    flows = {}

    def sender(cn, conn, size, delay):
        yield engine.sleep(delay)
        system.hosts[cn].send(conn, size)

    for _ in range(n_flows):
        src = rng.choice([0, 1, 2, 3])
        dst = rng.choice([c for c in (0, 1, 2, 3)
                          if (c < 2) != (src < 2)])  # always inter-rack
        size = rng.randrange(1, 17) * 4096
        conn = system.connect(src, dst)
        flows[conn.id] = (src, size)
        engine.spawn(sender(src, conn, size, rng.randrange(0, 2_000_000)),
                     EventKind.WORKLOAD_STEP)
    engine.run_until(None)

    problems = []
    # per-subflow FIFO from the trace
    last_offset = {}
    for rec in trace:
        if rec.get("ev") == "subflow_rx":
            key = (rec["flow"], rec["subflow"])
            if key in last_offset and rec["offset"] <= last_offset[key]:
                problems.append(f"subflow reorder on {key}")
            last_offset[key] = rec["offset"]
    # gapless in-order delivery and stream hash equality
    delivered = {}
    hashes = {}
    for rec in trace:
        if rec.get("ev") == "deliver":
            fid = rec["flow"]
            expect = delivered.get(fid, 0)
            if rec["offset"] != expect:
                problems.append(
                    f"flow {fid}: delivery at {rec['offset']} expected {expect}")
            delivered[fid] = expect + rec["len"]
            h = hashes.setdefault(fid, hashlib.sha256())
            h.update(_stream_bytes(fid, rec["offset"], rec["len"]))
    for fid, (src, size) in flows.items():
        if delivered.get(fid, 0) != size:
            problems.append(f"flow {fid}: delivered {delivered.get(fid, 0)} "
                            f"of {size}")
            continue
        sent = hashlib.sha256(_stream_bytes(fid, 0, size)).hexdigest()
        if hashes[fid].hexdigest() != sent:
            problems.append(f"flow {fid}: stream hash mismatch")
    under = engine.metrics.get("rx_underflow")
    drops = engine.metrics.get("packets_dropped")
    if drops:
        problems.append(f"drops={drops}")
    return CriterionResult(
        "A7", not problems,
        f"{n_flows} flows over 4 heterogeneous subflows: hashes equal, "
        f"in-order, per-subflow FIFO; underflow={under}"
        + ("" if not problems else f"; FAIL: {problems[:3]}"))


# ---------------------------------------------------------------------------
# A8: copy accounting and ping-pong latency
# ---------------------------------------------------------------------------

def check_a8() -> CriterionResult:
    sizes = [64, 256, 1024, 4096, 16 * 1024, 64 * 1024]
    iters = 20
    problems = []
    rtts = {}
    for size in sizes:
        segs = max(1, math.ceil(size / 4096))
        total_segs = iters * 2 * segs
        per_sys = {}
        for system in ("dfabric", "tor_baseline"):
            raw = {
                "system": system, "seed": 3,
                "fabric": {"cxl_max_throughput": 150_000_000, "theta": 1},
                "workload": {"kind": "pingpong", "msg_size": size,
                             "iters": iters, "participants": [0, 1]},
            }
            res = _run(raw)
            s = res.report["summary"]
            per_sys[system] = s
            copies = s["data_copies"]
            expect = total_segs if system == "dfabric" else 2 * total_segs
            if copies != expect:
                problems.append(
                    f"{system} {size}B: copies {copies} != {expect}")
        rtts[size] = (per_sys["dfabric"]["avg_us"],
                      per_sys["tor_baseline"]["avg_us"])
        if rtts[size][0] >= rtts[size][1]:
            problems.append(f"{size}B: dfabric {rtts[size][0]} us not below "
                            f"baseline {rtts[size][1]} us")
    detail = ", ".join(f"{sz}B:{d:.0f}/{b:.0f}us"
                       for sz, (d, b) in rtts.items())
    return CriterionResult(
        "A8", not problems,
        f"copies 1/segment vs 2/segment exact; RTT dfabric/baseline "
        f"[{detail}]" + ("" if not problems else f"; FAIL: {problems[:3]}"))


# ---------------------------------------------------------------------------
# A9: determinism, conservation, leak accounting
# ---------------------------------------------------------------------------

def _preset_config(kind: str, system: str) -> dict:
    wl = {
        "ring_allreduce": {"kind": "ring_allreduce", "payload_bytes": MIB},
        "all_to_all": {"kind": "all_to_all", "payload_bytes": 256 * 1024},
        "gather": {"kind": "gather", "payload_bytes": 512 * 1024},
        "broadcast": {"kind": "broadcast", "payload_bytes": 512 * 1024},
        "shuffle": {"kind": "shuffle", "payload_bytes": 512 * 1024,
                    "mappers": 3},
        "pingpong": {"kind": "pingpong", "msg_size": 4096, "iters": 10},
        "kv": {"kind": "kv", "ops": 50, "clients": 1, "servers": 3},
    }[kind]
    return {
        "system": system, "seed": 99,
        "fabric": {"cxl_max_throughput": 150_000_000, "theta": 8},
        "workload": wl,
    }


def check_a9() -> CriterionResult:
    import json as _json
    problems = []
    # determinism: byte-identical reports for two identical runs
    for system in ("dfabric", "tor_baseline"):
        raw = _preset_config("ring_allreduce", system)
        blobs = []
        for _ in range(2):
            res = _run(raw)
            blobs.append(_json.dumps(res.report, sort_keys=True)
                         + repr(res.ts_rows))
        if blobs[0] != blobs[1]:
            problems.append(f"{system}: reports differ across identical runs")
    # conservation and leak accounting across every preset
    kinds = ["ring_allreduce", "all_to_all", "gather", "broadcast",
             "shuffle", "pingpong", "kv"]
    for kind in kinds:
        for system in ("dfabric", "tor_baseline"):
            res = _run(_preset_config(kind, system))
            s = res.report["summary"]
            if s["bytes_received"] != s["expected_volume_bytes"]:
                problems.append(
                    f"{system}/{kind}: received {s['bytes_received']} != "
                    f"analytic {s['expected_volume_bytes']}")
            if system == "dfabric" and res.system.leaked_buffer_count:
                problems.append(f"{kind}: leaked buffers")
    return CriterionResult(
        "A9", not problems,
        "identical seeds give identical reports; received bytes equal the "
        "analytic volume for all presets; zero leaks"
        + ("" if not problems else f"; FAIL: {problems[:3]}"))


CRITERIA = {
    "A1": check_a1,
    "A2": check_a2,
    "A3": check_a3,
    "A4": check_a4,
    "A5": check_a5,
    "A6": check_a6,
    "A7": check_a7,
    "A8": check_a8,
    "A9": check_a9,
}


def run_criteria(only: str | None = None) -> list[CriterionResult]:
    ids = [only] if only else list(CRITERIA)
    results = []
    for cid in ids:
        if cid not in CRITERIA:
            raise KeyError(f"unknown criterion {cid}")
        results.append(CRITERIA[cid]())
    return results
