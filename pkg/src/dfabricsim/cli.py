"""Command-line experiment runner: run, sweep, compare, validate."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import acceptance, runner
from .builder import InvariantViolation
from .config import ConfigError, load_config


def _parse_values(text: str) -> list:
    values = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            values.append(json.loads(chunk))
        except json.JSONDecodeError:
            values.append(chunk)
    return values


def _default_out(config_path: str, suffix: str = "out") -> str:
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return f"{stem}.{suffix}"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = args.out_dir or _default_out(args.config)
    os.makedirs(out_dir, exist_ok=True)
    trace_path = os.path.join(out_dir, "trace.jsonl") if args.trace else None
    res = runner.run_experiment(cfg, out_dir=out_dir, trace_path=trace_path,
                                figures=not args.no_figures)
    s = res.report["summary"]
    print(f"system={cfg['system']} workload={s['workload']} "
          f"sim_time={s['sim_time_ms']:.3f} ms")
    print(f"comm_time={s['comm_time_ms']:.3f} ms  "
          f"bytes_received={s['bytes_received']}  drops={s['drops']}")
    if s["p99_us"] is not None:
        print(f"latency avg={s['avg_us']} us  p99={s['p99_us']} us")
    print(f"report: {os.path.join(out_dir, 'report.json')}")
    return 0


def cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    values = _parse_values(args.values)
    out_dir = args.out_dir or _default_out(args.config, "sweep")
    rows = runner.sweep(raw, args.param, values, out_dir,
                        figures=not args.no_figures)
    for row in rows:
        print(f"{args.param}={row['param_value']} system={row['system']} "
              f"comm_time_ms={row['comm_time_ms']} drops={row['drops']}")
    print(f"csv: {os.path.join(out_dir, 'sweep.csv')}")
    return 0


def cmd_compare(args) -> int:
    cfg_a = load_config(args.config_a)
    cfg_b = load_config(args.config_b)
    out_dir = args.out_dir or _default_out(args.config_a, "compare")
    delta = runner.compare(cfg_a, cfg_b, out_dir,
                           figures=not args.no_figures)
    print(json.dumps(delta, indent=2, sort_keys=True))
    return 0


def cmd_validate(args) -> int:
    results = acceptance.run_criteria(only=args.only)
    all_pass = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        all_pass &= r.passed
        print(f"{r.cid}  {status}  {r.details}")
    print("acceptance: " + ("all criteria pass" if all_pass
                            else "FAILURES present"))
    return 0 if all_pass else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dfabric-sim",
        description="Discrete-event simulator of a pooled-fabric rack "
                    "(memory + NIC pooling + DRAM cache) against a "
                    "conventional ToR rack.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out-dir")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--trace", action="store_true",
                       help="also write trace.jsonl")
    p_run.add_argument("--no-figures", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter sweep")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--param", required=True,
                         choices=list(runner.SWEEP_PARAMS))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated values")
    p_sweep.add_argument("--out-dir")
    p_sweep.add_argument("--no-figures", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="compare two configs")
    p_cmp.add_argument("config_a")
    p_cmp.add_argument("config_b")
    p_cmp.add_argument("--out-dir")
    p_cmp.add_argument("--no-figures", action="store_true")
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="run the acceptance criteria")
    p_val.add_argument("--only", help="run a single criterion, e.g. A3")
    p_val.set_defaults(func=cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
