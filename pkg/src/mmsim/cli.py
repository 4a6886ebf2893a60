"""Command-line interface.

Subcommands: gen-trace, simulate, sweep, compare, report. Exit codes:
0 success, 2 configuration/usage error, 3 simulation error.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import experiments as exp
from .core import (MmsimError, SloConfig, TraceParseError, write_trace)
from .engine import ConfigError, RunConfig, config_for_policy, run
from .metrics import aggregate, calibrate_light_load, slo_from_calibration
from .workload import BurstSpec, generate, load_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIM = 3


def _add_cluster_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--kv-capacity", type=int, default=240_000)
    p.add_argument("--cache-budget", type=int, default=400_000)
    p.add_argument("--static-mm-fraction", type=float, default=0.5)
    p.add_argument("--cache", dest="cache", action="store_true", default=None,
                   help="force the unified cache on")
    p.add_argument("--no-cache", dest="cache", action="store_false",
                   help="force the unified cache off")
    p.add_argument("--blocking-encode", action="store_true", default=None,
                   help="ablation: image encoding stalls the group's prefill")


def _base_config(args) -> RunConfig:
    return RunConfig(n_instances=args.instances, kv_capacity=args.kv_capacity,
                     cache_budget_tokens=args.cache_budget,
                     static_mm_fraction=args.static_mm_fraction)


def _policy_overrides(args) -> dict:
    overrides = {}
    if getattr(args, "cache", None) is not None:
        overrides["cache_enabled"] = args.cache
    if getattr(args, "blocking_encode", None) is not None:
        overrides["blocking_encode"] = args.blocking_encode
    return overrides


def _parse_qps_grid(text: str) -> list[float]:
    """'start:stop:step' inclusive grid, or a comma list."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        points = []
        q = start
        while q <= stop + 1e-9:
            points.append(round(q, 6))
            q += step
        return points
    return [float(x) for x in text.split(",")]


def cmd_gen_trace(args) -> int:
    profile = exp.resolve_dataset_profile(args.profile)
    bursts = [BurstSpec.parse(b) for b in args.burst]
    trace = generate(profile, args.qps, args.horizon, args.seed, bursts)
    write_trace(args.out, trace)
    print(f"wrote {len(trace)} requests to {args.out}")
    return EXIT_OK


def _resolve_slo(args, cost, base_cfg) -> SloConfig | None:
    if args.slo_input is not None and args.slo_output is not None:
        return SloConfig(light_load_latency_input=args.slo_input / 10.0,
                         light_load_latency_output=args.slo_output / 10.0,
                         scale=args.slo_scale)
    if args.calibrate_slo:
        dataset = exp.resolve_dataset_profile(args.profile)
        light = calibrate_light_load(dataset, cost, base_cfg, seed=args.seed)
        return slo_from_calibration(light[0], light[1], args.slo_scale)
    return None


def cmd_simulate(args) -> int:
    cost = exp.resolve_cost_profile(args.cost_profile)
    base_cfg = _base_config(args)
    trace = load_trace(args.trace)
    slo = _resolve_slo(args, cost, base_cfg)
    cfg = config_for_policy(args.policy, base_cfg, **_policy_overrides(args))
    cfg = cfg.copy_with(collect_audit=args.audit is not None,
                        collect_event_log=args.event_log is not None)
    slo_input = slo.slo_input if slo is not None else float("inf")
    result = run(trace, args.policy, cost, cfg, slo_input, args.seed)
    report = aggregate(result, slo)
    payload = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        print(payload)
    if args.csv:
        exp.write_csv(args.csv,
                      list(report.request_rows[0].keys()) if report.request_rows else ["id"],
                      report.request_rows)
    if args.audit:
        with open(args.audit, "w", encoding="utf-8") as fh:
            for entry in result.audit:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if args.event_log:
        with open(args.event_log, "w", encoding="utf-8") as fh:
            for entry in result.event_log or []:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
    if args.out:
        agg = report.aggregates
        print(f"policy={args.policy} requests={report.throughput['completed']} "
              f"mean_ttft={agg['ttft']['mean']:.4f}s "
              f"p90_norm_input={agg['norm_input_latency']['p90']:.6f}s/tok")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cost = exp.resolve_cost_profile(args.cost_profile)
    dataset = exp.resolve_dataset_profile(args.profile)
    base_cfg = _base_config(args)
    slo = _resolve_slo(args, cost, base_cfg)
    policies = args.policies.split(",")
    qps_points = _parse_qps_grid(args.qps)
    overrides = {p: _policy_overrides(args) for p in policies}
    rows = exp.latency_sweep(policies, qps_points, dataset, cost, slo, base_cfg,
                             seed=args.seed, horizon=args.horizon,
                             overrides_by_policy=overrides, workers=args.workers)
    exp.write_csv(args.out, exp.LATENCY_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cost = exp.resolve_cost_profile(args.cost_profile)
    dataset = exp.resolve_dataset_profile(args.profile)
    base_cfg = _base_config(args)
    policies = args.policies.split(",")
    if args.figure in ("throughput", "allocation"):
        light = calibrate_light_load(dataset, cost, base_cfg, seed=args.seed)
    if args.figure == "latency":
        slo = _resolve_slo(args, cost, base_cfg)
        rows = exp.latency_sweep(policies, _parse_qps_grid(args.qps), dataset,
                                 cost, slo, base_cfg, seed=args.seed,
                                 horizon=args.horizon, workers=args.workers)
        columns = exp.LATENCY_COLUMNS
    elif args.figure == "throughput":
        rows = exp.throughput_vs_slo_scale(
            policies, [1.0, 2.0, 3.0, 4.0, 5.0], dataset, cost, light,
            base_cfg, seed=args.seed, horizon=args.horizon,
            qps_range=(args.qps_min, args.qps_max))
        columns = exp.THROUGHPUT_COLUMNS
    elif args.figure == "allocation":
        rows = exp.allocation_ablation(dataset, cost, light, base_cfg,
                                       seed=args.seed, horizon=args.horizon,
                                       qps_range=(args.qps_min, args.qps_max))
        columns = exp.ALLOCATION_COLUMNS
    elif args.figure == "optimization":
        slo = _resolve_slo(args, cost, base_cfg)
        rows = exp.optimization_ablation(dataset, cost, slo, base_cfg,
                                         seed=args.seed, horizon=args.horizon,
                                         qps_points=_parse_qps_grid(args.qps))
        columns = exp.OPTIMIZATION_COLUMNS
    else:
        raise ConfigError(f"unknown figure {args.figure!r}")
    exp.write_csv(args.out, columns, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.input, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("empty"):
        print("empty run (no completed requests)")
        return EXIT_OK
    agg = doc["aggregates"]
    thr = doc["throughput"]
    print(f"policy:               {doc['policy']} (seed {doc['seed']})")
    print(f"completed requests:   {thr['completed']}")
    print(f"requests/s:           {thr['requests_per_second']:.3f}")
    print(f"output tokens/s:      {thr['output_tokens_per_second']:.1f}")
    print(f"TTFT mean/p50/p90/p99: "
          f"{agg['ttft']['mean']:.4f} / {agg['ttft']['p50']:.4f} / "
          f"{agg['ttft']['p90']:.4f} / {agg['ttft']['p99']:.4f} s")
    print(f"norm input latency p90:  {agg['norm_input_latency']['p90']:.6f} s/tok")
    print(f"norm output latency p90: {agg['norm_output_latency']['p90']:.6f} s/tok")
    if doc.get("slo"):
        print(f"SLO attainment:       {doc['slo']['attainment']:.3f} "
              f"(p90_ok={doc['slo']['p90_ok']})")
    ops = doc["operations"]
    print(f"ops: preempt={ops['preemptions_opportunistic']}+{ops['preemptions_forced']} "
          f"migrations={ops['migrations']} scale={ops['scale_ups']}/{ops['scale_downs']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmsim",
                                     description="Elastic multimodal serving simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic trace")
    p.add_argument("--profile", required=True)
    p.add_argument("--qps", type=float, required=True)
    p.add_argument("--horizon", type=float, default=300.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--burst", action="append", default=[],
                   help="start:duration:multiplier:modality (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", help="run one trace under one policy")
    p.add_argument("--trace", required=True)
    p.add_argument("--policy", required=True,
                   choices=["elastic", "static", "coupled"])
    p.add_argument("--cost-profile", default="default")
    p.add_argument("--profile", default="sharegpt4o-like",
                   help="dataset profile used only for SLO calibration")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--slo-scale", type=float, default=1.0)
    p.add_argument("--slo-input", type=float, default=None,
                   help="explicit per-token input SLO (seconds/token)")
    p.add_argument("--slo-output", type=float, default=None)
    p.add_argument("--calibrate-slo", action="store_true")
    p.add_argument("--out", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--audit", default=None)
    p.add_argument("--event-log", default=None)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="QPS grid across policies")
    p.add_argument("--profile", required=True)
    p.add_argument("--cost-profile", default="default")
    p.add_argument("--qps", required=True, help="start:stop:step or comma list")
    p.add_argument("--policies", default="elastic,static,coupled")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--horizon", type=float, default=120.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--slo-scale", type=float, default=5.0)
    p.add_argument("--slo-input", type=float, default=None)
    p.add_argument("--slo-output", type=float, default=None)
    p.add_argument("--calibrate-slo", action="store_true")
    p.add_argument("--out", required=True)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="emit a figure-shaped CSV")
    p.add_argument("--figure", required=True,
                   choices=["latency", "throughput", "allocation", "optimization"])
    p.add_argument("--profile", default="sharegpt4o-like")
    p.add_argument("--cost-profile", default="default")
    p.add_argument("--policies", default="elastic,static,coupled")
    p.add_argument("--qps", default="0.4:2.4:0.2")
    p.add_argument("--qps-min", type=float, default=0.2)
    p.add_argument("--qps-max", type=float, default=6.4)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--horizon", type=float, default=120.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--slo-scale", type=float, default=5.0)
    p.add_argument("--slo-input", type=float, default=None)
    p.add_argument("--slo-output", type=float, default=None)
    p.add_argument("--calibrate-slo", action="store_true")
    p.add_argument("--out", required=True)
    _add_cluster_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="pretty-print a report JSON")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, TraceParseError, ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MmsimError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM


if __name__ == "__main__":
    sys.exit(main())
