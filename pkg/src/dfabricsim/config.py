"""Experiment configuration: defaults, strict validation, derivation.

The file format is JSON with the sections {system, fabric, mem_pool, cache,
transport, nic_pool, baseline, workload}.  Unknown keys are errors.  All
bandwidths are bytes/second; capacities are MiB; latencies carry a unit
suffix in the key name.
"""

from __future__ import annotations

import copy
import json
from typing import Any, Optional

MIB = 1024 * 1024
GIB = 1024 * MIB

WORKLOAD_KINDS = (
    "ring_allreduce", "all_to_all", "gather", "broadcast",
    "shuffle", "pingpong", "kv",
)

DEFAULTS: dict[str, Any] = {
    "system": "dfabric",
    "seed": 1,
    "duration_ms": None,  # None: run the workload to completion
    "fabric": {
        "cxl_max_throughput": 1_000_000_000,  # C, bytes/s
        "theta": 8.0,  # NIC bandwidth reducing factor; B = C/theta
        "window": 8,  # outstanding load/store accesses per node
        "local_base_ns": 650,
        "remote_base_ns": 6500,
        "network_hop_us": 32.5,
        "racks": 2,
        "cns_per_rack": 2,  # N
    },
    "mem_pool": {
        # per-rack devices; null -> one cn-local device per CN plus one
        # fabric-attached device, 16 GiB each (bandwidth null -> 4*C)
        "devices": None,
        "rx_buffer_placement": "fabric-attached",  # or "all"
    },
    "cache": {
        "enabled": True,
        "capacity_mib": 2048,
        "ways": 8,
        "granularity": 4096,
    },
    "transport": {
        "poll_period_us": 10.0,
        "batch": 32,
        "vq_capacity": 256,
        "fill_depth": 8,
        "mtu": 4096,
        "tsq_enabled": False,
        "tsq_limit": 2,
        "concurrent_txq_polling": True,
        "interrupt_delay_us": 2.0,
        "txq_op_ns": 13_000,
        "rxq_op_ns": 13_000,
        "local_q_op_ns": 1_300,
        "phq_op_ns": 1_300,
        "interrupt_ns": 6_500,
        "free_op_ns": 500,
        "ack_delay_us": 32.5,
        "initial_cwnd": 10,
    },
    "nic_pool": {
        "added_nics": 2,  # M
        "bandwidth_per_nic": None,  # null -> C/theta
        "nic_bandwidths": None,  # explicit per-NIC override list
        "sched_epoch_us": 100.0,
        "subflows_per_flow": None,  # null -> NIC count
        "phq_depth": 1024,
        "rx_post_per_nic": 64,
        "dma_depth": 4,
        "uplinks": None,  # null -> NIC count
    },
    "baseline": {
        "nic_bandwidth": None,  # null -> C/theta
        "uplinks": 1,
        "port_buffer_bytes": 256 * 1024,
        "min_rto_us": 5000.0,
        "initial_cwnd": 10,
        "memcpy_bytes_per_s": 10_000_000_000,
        "stack_ns": 1_000,
    },
    "workload": {
        "kind": "ring_allreduce",
        "payload_bytes": 4 * MIB,  # per participant per superstep
        "supersteps": 1,
        "participants": None,  # null -> all CNs
        "compute_delay_us": 0.0,
        "mappers": 3,  # shuffle
        "msg_size": 4096,  # pingpong
        "iters": 50,  # pingpong
        "clients": 1,  # kv
        "servers": 3,  # kv
        "ops": 200,  # kv
        "get_fraction": 0.9,  # kv
        "value_bytes": 1024,  # kv
        "key_bytes": 64,  # kv
    },
}


class ConfigError(Exception):
    """Invalid configuration; the message carries the offending key path."""


def _line_of(raw_text: Optional[str], key: str) -> str:
    if not raw_text:
        return ""
    for i, line in enumerate(raw_text.splitlines(), 1):
        if f'"{key}"' in line:
            return f" (line {i})"
    return ""


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        raw_text = fh.read()
    try:
        raw = json.loads(raw_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")
    return validate_config(raw, raw_text)


def validate_config(raw: dict, raw_text: Optional[str] = None) -> dict:
    """Merge over defaults, reject unknown keys, check ranges, derive values."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object")
    cfg = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key '{key}'{_line_of(raw_text, key)}")
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section '{key}' must be an object")
            for sub, sval in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(
                        f"unknown key '{key}.{sub}'{_line_of(raw_text, sub)}")
                cfg[key][sub] = sval
        else:
            cfg[key] = value

    if cfg["system"] not in ("dfabric", "tor_baseline"):
        raise ConfigError(f"system must be dfabric or tor_baseline, "
                          f"got '{cfg['system']}'")
    fab = cfg["fabric"]
    if not fab["theta"] or fab["theta"] < 1:
        raise ConfigError("fabric.theta must be >= 1")
    if fab["cxl_max_throughput"] <= 0:
        raise ConfigError("fabric.cxl_max_throughput must be positive")
    if fab["racks"] not in (1, 2):
        raise ConfigError("fabric.racks must be 1 or 2")
    if fab["cns_per_rack"] < 1:
        raise ConfigError("fabric.cns_per_rack must be >= 1")
    # one window for every node, or one entry per node
    windows = (fab["window"] if isinstance(fab["window"], list)
               else [fab["window"]])
    if isinstance(fab["window"], list):
        if len(fab["window"]) != fab["racks"] * fab["cns_per_rack"]:
            raise ConfigError("fabric.window list must have one entry per CN")
    for w in windows:
        if not (1 <= w <= 64):
            raise ConfigError("fabric.window must be in [1, 64]")

    c = int(fab["cxl_max_throughput"])
    derived_b = max(1, int(round(c / fab["theta"])))

    npool = cfg["nic_pool"]
    if npool["bandwidth_per_nic"] is None:
        npool["bandwidth_per_nic"] = derived_b
    n_nics = fab["cns_per_rack"] + npool["added_nics"]
    if npool["nic_bandwidths"] is not None:
        if len(npool["nic_bandwidths"]) != n_nics:
            raise ConfigError(
                f"nic_pool.nic_bandwidths must list N+M={n_nics} entries")
    else:
        npool["nic_bandwidths"] = [npool["bandwidth_per_nic"]] * n_nics
    if npool["added_nics"] < 0:
        raise ConfigError("nic_pool.added_nics must be >= 0")
    if n_nics < 1:
        raise ConfigError("the NIC pool needs at least one NIC")
    if npool["subflows_per_flow"] is None:
        npool["subflows_per_flow"] = n_nics
    if npool["uplinks"] is None:
        npool["uplinks"] = n_nics

    base = cfg["baseline"]
    if base["nic_bandwidth"] is None:
        base["nic_bandwidth"] = derived_b
    if base["uplinks"] < 1:
        raise ConfigError("baseline.uplinks must be >= 1")

    mem = cfg["mem_pool"]
    if mem["devices"] is not None and not mem["devices"]:
        raise ConfigError("mem_pool.devices must list at least one device")
    if mem["devices"] is None:
        mem["devices"] = (
            [{"capacity_mib": 16 * 1024, "bandwidth": None,
              "location": "cn-local"} for _ in range(fab["cns_per_rack"])]
            + [{"capacity_mib": 16 * 1024, "bandwidth": None,
                "location": "fabric-attached"}]
        )
    n_local = 0
    for i, dev in enumerate(mem["devices"]):
        allowed = {"capacity_mib", "bandwidth", "location"}
        unknown = set(dev) - allowed
        if unknown:
            raise ConfigError(
                f"unknown key mem_pool.devices[{i}].{unknown.pop()}")
        if dev.get("location") not in ("cn-local", "fabric-attached"):
            raise ConfigError(
                f"mem_pool.devices[{i}].location must be cn-local or "
                f"fabric-attached")
        if dev.get("capacity_mib", 0) <= 0:
            raise ConfigError(f"mem_pool.devices[{i}].capacity_mib must be > 0")
        if dev.get("bandwidth") is None:
            dev["bandwidth"] = 4 * c
        n_local += dev["location"] == "cn-local"
    if n_local > fab["cns_per_rack"]:
        raise ConfigError("more cn-local devices than CNs per rack")
    if mem["rx_buffer_placement"] not in ("fabric-attached", "all"):
        raise ConfigError("mem_pool.rx_buffer_placement must be "
                          "'fabric-attached' or 'all'")
    if (mem["rx_buffer_placement"] == "fabric-attached"
            and not any(d["location"] == "fabric-attached"
                        for d in mem["devices"])):
        raise ConfigError("rx_buffer_placement is fabric-attached but no "
                          "fabric-attached device is configured")

    cache = cfg["cache"]
    if cache["ways"] < 2:
        raise ConfigError("cache.ways must be >= 2")
    if cache["capacity_mib"] <= 0:
        raise ConfigError("cache.capacity_mib must be > 0")

    tp = cfg["transport"]
    if tp["mtu"] < 256 or tp["mtu"] > 2 * MIB:
        raise ConfigError("transport.mtu must be in [256, 2 MiB]")
    if tp["tsq_limit"] < 1:
        raise ConfigError("transport.tsq_limit must be >= 1")

    wl = cfg["workload"]
    if wl["kind"] not in WORKLOAD_KINDS:
        raise ConfigError(f"workload.kind must be one of {WORKLOAD_KINDS}, "
                          f"got '{wl['kind']}'")
    if wl["kind"] != "pingpong" and wl["payload_bytes"] <= 0:
        raise ConfigError("workload.payload_bytes must be positive")
    if wl["supersteps"] < 1:
        raise ConfigError("workload.supersteps must be >= 1")
    total_cns = fab["racks"] * fab["cns_per_rack"]
    if wl["participants"] is not None:
        for p in wl["participants"]:
            if not (0 <= p < total_cns):
                raise ConfigError(f"workload participant {p} out of range")
        if len(set(wl["participants"])) != len(wl["participants"]):
            raise ConfigError("workload participants must be distinct")
    if wl["kind"] == "ring_allreduce":
        n = (len(wl["participants"]) if wl["participants"] is not None
             else total_cns)
        if n < 2:
            raise ConfigError("ring_allreduce needs at least 2 participants")
        if wl["payload_bytes"] % n:
            raise ConfigError(
                f"ring_allreduce payload_bytes must divide by {n} participants")
    if wl["kind"] == "kv" and wl["ops"] < 1:
        raise ConfigError("workload.ops must be >= 1")
    if wl["kind"] == "pingpong" and wl["iters"] < 1:
        raise ConfigError("workload.iters must be >= 1")
    if wl["kind"] == "shuffle" and wl["mappers"] < 1:
        raise ConfigError("workload.mappers must be >= 1")
    if cfg["duration_ms"] is not None and cfg["duration_ms"] <= 0:
        raise ConfigError("duration_ms must be positive when set")
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
