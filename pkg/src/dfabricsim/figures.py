"""Figure rendering for run/sweep/compare outputs.

PNGs land in a figures/ directory next to the delimited reports; the CSV
remains the canonical record, figures are a readable view of the same data.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _figdir(out_dir: str) -> str:
    path = os.path.join(out_dir, "figures")
    os.makedirs(path, exist_ok=True)
    return path


def render_run(report: dict, ts_rows: list, out_dir: str) -> list[str]:
    written = []
    figdir = _figdir(out_dir)
    series: dict[str, tuple[list, list]] = {}
    for t_ms, metric, value in ts_rows:
        xs, ys = series.setdefault(metric, ([], []))
        xs.append(t_ms)
        ys.append(value / 1e3)  # bytes per 1 ms window -> KB/ms == MB/s
    if series:
        fig, ax = plt.subplots(figsize=(7, 4))
        for metric in sorted(series):
            xs, ys = series[metric]
            ax.plot(xs, ys, label=metric, linewidth=1.2)
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("MB/s")
        ax.set_title(f"{report['config']['system']} / "
                     f"{report['summary']['workload']}")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        path = os.path.join(figdir, "throughput.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    if report["summary"].get("latency_samples"):
        lat = report["summary"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        labels = ["avg", "p50", "p99"]
        vals = [lat["avg_us"], lat["p50_us"], lat["p99_us"]]
        ax.bar(labels, vals, color=["#4477aa", "#66ccee", "#ee6677"])
        ax.set_ylabel("latency (us)")
        ax.set_title("per-operation latency")
        path = os.path.join(figdir, "latency.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def render_sweep(param: str, rows: list[dict], out_dir: str) -> str:
    figdir = _figdir(out_dir)
    fig, ax = plt.subplots(figsize=(6, 4))
    for system, marker in (("dfabric", "o"), ("tor_baseline", "s")):
        pts = [(r["param_value"], r["comm_time_ms"]) for r in rows
               if r["system"] == system]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts],
                    marker=marker, label=system)
    ax.set_xlabel(param)
    ax.set_ylabel("communication time (ms)")
    ax.grid(alpha=0.3)
    ax.legend()
    path = os.path.join(figdir, "sweep.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def render_compare(delta: dict, out_dir: str) -> str:
    figdir = _figdir(out_dir)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    labels, values = [], []
    for key in ("comm_time_reduction_pct", "p99_reduction_pct"):
        if delta.get(key) is not None:
            labels.append(key.replace("_reduction_pct", ""))
            values.append(delta[key])
    if values:
        ax.bar(labels, values, color="#228833")
        ax.axhline(0, color="black", linewidth=0.8)
        ax.set_ylabel("reduction of A vs B (%)")
    path = os.path.join(figdir, "compare.png")
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path
