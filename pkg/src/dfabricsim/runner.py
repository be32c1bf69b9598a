"""Experiment execution and reporting.

``run_experiment`` builds a system from a validated config, drives the
workload to completion (or to the configured duration), checks end-of-run
invariants, and emits report.json plus timeseries.csv (1 ms windows), an
optional trace.jsonl, and rendered figures next to the delimited output.
"""

from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .builder import InvariantViolation, build_system
from .config import ConfigError, validate_config
from .sim_core import percentile
from .workloads import WorkloadRun

SWEEP_PARAMS = ("theta", "M", "memory_bandwidth", "cache.enabled",
                "tsq_enabled")


@dataclass
class RunResult:
    report: dict
    ts_rows: list
    out_dir: Optional[str] = None
    system: object = field(default=None, repr=False)
    workload: object = field(default=None, repr=False)


def _latency_summary(records) -> dict:
    if not records:
        return {"avg_us": None, "p50_us": None, "p99_us": None,
                "latency_samples": 0}
    durs = [d for _f, d in records]
    return {
        "avg_us": round(sum(durs) / len(durs) / 1000, 3),
        "p50_us": round(percentile(records, 0.5) / 1000, 3),
        "p99_us": round(percentile(records, 0.99) / 1000, 3),
        "latency_samples": len(records),
    }


def run_experiment(cfg: dict, out_dir: Optional[str] = None,
                   trace_path: Optional[str] = None,
                   trace_sink: Optional[list] = None,
                   figures: bool = True) -> RunResult:
    system = build_system(cfg)
    engine = system.engine
    trace_file = None
    if trace_path:
        trace_file = open(trace_path, "w", encoding="utf-8")

        def write_trace(rec: dict) -> None:
            trace_file.write(json.dumps(rec, sort_keys=True) + "\n")

        engine.trace = write_trace
    elif trace_sink is not None:
        engine.trace = trace_sink.append

    wl = WorkloadRun(system, cfg["workload"])
    t_end = (None if cfg["duration_ms"] is None
             else int(cfg["duration_ms"] * 1_000_000))
    metrics = engine.run_until(t_end)
    if trace_file:
        trace_file.close()

    completed = wl.result.completed
    if completed:
        problems = system.finish_checks()
        if problems:
            raise InvariantViolation("; ".join(problems))

    counters = {k: metrics.counters[k] for k in sorted(metrics.counters)}
    summary = {
        "sim_time_ms": round(engine.now / 1e6, 6),
        "workload": wl.result.description,
        "completed": completed,
        "comm_time_ms": round(wl.result.comm_time_ns / 1e6, 6),
        "comm_time_ms_per_superstep": [round(t / 1e6, 6)
                                       for t in wl.result.superstep_times_ns],
        "expected_volume_bytes": wl.result.expected_volume,
        "bytes_sent": counters.get("bytes_sent", 0),
        "bytes_received": counters.get("bytes_received", 0),
        "drops": counters.get("packets_dropped", 0),
        "rx_underflow": counters.get("rx_underflow", 0),
        "retransmissions": counters.get("retransmissions", 0),
        "data_copies": counters.get("data_copies", 0),
        "flows": len(system.conns),
    }
    if wl.result.comm_time_ns:
        summary["goodput_mbytes_per_s"] = round(
            wl.result.expected_volume / (wl.result.comm_time_ns / 1e9) / 1e6, 3)
    summary.update(_latency_summary(metrics.latency_records))

    report = {"config": cfg, "counters": counters, "summary": summary}
    if cfg["system"] == "dfabric":
        report["pool"] = [rack.pool.layout_summary() for rack in system.racks]
    ts_rows = metrics.window_rows()

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out_dir, "timeseries.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "metric", "value"])
            w.writerows(ts_rows)
        if figures:
            from . import figures as figmod
            figmod.render_run(report, ts_rows, out_dir)
    return RunResult(report, ts_rows, out_dir, system, wl)


def _apply_sweep_param(raw: dict, base_cfg: dict, param: str, value):
    raw = copy.deepcopy(raw)
    if param == "theta":
        raw.setdefault("fabric", {})["theta"] = value
    elif param == "M":
        raw.setdefault("nic_pool", {})["added_nics"] = int(value)
    elif param == "memory_bandwidth":
        devices = copy.deepcopy(base_cfg["mem_pool"]["devices"])
        for dev in devices:
            dev["bandwidth"] = int(value)
        raw.setdefault("mem_pool", {})["devices"] = devices
    elif param == "cache.enabled":
        raw.setdefault("cache", {})["enabled"] = bool(value)
    elif param == "tsq_enabled":
        raw.setdefault("transport", {})["tsq_enabled"] = bool(value)
    else:
        raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}")
    return raw


def sweep(raw_cfg: dict, param: str, values: list, out_dir: str,
          figures: bool = True) -> list[dict]:
    """One run per (value, system); aggregated CSV sorted by value order."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigError("sweep needs a non-empty value list")
    base_cfg = validate_config(copy.deepcopy(raw_cfg))
    rows = []
    for value in values:
        for system in ("dfabric", "tor_baseline"):
            raw = _apply_sweep_param(raw_cfg, base_cfg, param, value)
            raw["system"] = system
            cfg = validate_config(raw)
            res = run_experiment(cfg, out_dir=None, figures=False)
            s = res.report["summary"]
            rows.append({
                "param_value": value,
                "system": system,
                "comm_time_ms": s["comm_time_ms"],
                "p99_us": s["p99_us"] if s["p99_us"] is not None else "",
                "drops": s["drops"],
            })
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["param_value", "system",
                                           "comm_time_ms", "p99_us", "drops"])
        w.writeheader()
        w.writerows(rows)
    if figures:
        from . import figures as figmod
        figmod.render_sweep(param, rows, out_dir)
    return rows


def compare(cfg_a: dict, cfg_b: dict, out_dir: Optional[str] = None,
            figures: bool = True) -> dict:
    """Relative reductions of run A against run B (positive: A is better)."""
    if cfg_a["workload"] != cfg_b["workload"]:
        raise ConfigError("compare requires the same workload in both configs")
    res_a = run_experiment(cfg_a, figures=False)
    res_b = run_experiment(cfg_b, figures=False)
    sa, sb = res_a.report["summary"], res_b.report["summary"]

    def reduction(key):
        a, b = sa.get(key), sb.get(key)
        if not a or not b:
            return None
        return round(100.0 * (b - a) / b, 3)

    delta = {
        "a": {"system": cfg_a["system"], "comm_time_ms": sa["comm_time_ms"],
              "p99_us": sa["p99_us"], "drops": sa["drops"]},
        "b": {"system": cfg_b["system"], "comm_time_ms": sb["comm_time_ms"],
              "p99_us": sb["p99_us"], "drops": sb["drops"]},
        "comm_time_reduction_pct": reduction("comm_time_ms"),
        "p99_reduction_pct": reduction("p99_us"),
        "drops_delta": sa["drops"] - sb["drops"],
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "compare.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(delta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if figures:
            from . import figures as figmod
            figmod.render_compare(delta, out_dir)
    return delta
