"""Metric aggregation and SLO-constrained throughput search.

Normalized input latency is TTFT divided by total input tokens; normalized
output latency is decode time divided by output tokens. Percentiles use the
nearest-rank method. The throughput search bisects over QPS with a fixed
seed per probe and a P90 attainment criterion on both normalized latencies.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .core import SloConfig
from .costmodel import CostProfile
from .engine import RunConfig, RunResult, config_for_policy, run
from .workload import BurstSpec, DatasetProfile, generate


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile over a pre-sorted list."""
    if not sorted_values:
        raise ValueError("percentile of empty data")
    rank = math.ceil(percentile / 100.0 * len(sorted_values))
    return sorted_values[max(0, rank - 1)]


def summarize(values: list[float]) -> dict:
    ordered = sorted(values)
    return {
        "mean": sum(ordered) / len(ordered),
        "p50": nearest_rank(ordered, 50),
        "p90": nearest_rank(ordered, 90),
        "p99": nearest_rank(ordered, 99),
    }


@dataclass
class MetricsReport:
    policy: str
    seed: int
    empty: bool
    request_rows: list[dict]
    aggregates: dict
    throughput: dict
    slo: dict | None
    cache: dict
    operations: dict
    ttft_components: dict

    def as_dict(self) -> dict:
        return {
            "schema_version": 1,
            "policy": self.policy,
            "seed": self.seed,
            "empty": self.empty,
            "requests": self.request_rows,
            "aggregates": self.aggregates,
            "throughput": self.throughput,
            "slo": self.slo,
            "cache": self.cache,
            "operations": self.operations,
            "ttft_components": self.ttft_components,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=None,
                          separators=(",", ":"))


def aggregate(result: RunResult, slo: SloConfig | None = None) -> MetricsReport:
    """Fold a run's per-request records into the full report."""
    records = result.records
    if not records:
        return MetricsReport(
            policy=result.policy, seed=result.seed, empty=True, request_rows=[],
            aggregates={}, throughput={}, slo=None, cache=result.cache_stats,
            operations=result.counters, ttft_components={})
    rows = []
    for r in records:
        rows.append({
            "id": r.id, "modality": r.modality, "arrival": r.arrival,
            "first_token": r.first_token, "completion": r.completion,
            "input_len": r.input_len, "output_len": r.output_len,
            "ttft": r.ttft,
            "norm_input_latency": r.norm_input_latency,
            "norm_output_latency": r.norm_output_latency,
            "queue_wait": r.queue_wait, "encode_time": r.encode_time,
            "prefill_time": r.prefill_time, "migration_wait": r.migration_wait,
            "encoded_tokens": r.encoded_tokens,
            "prefilled_tokens": r.prefilled_tokens,
            "decoded_tokens": r.decoded_tokens,
            "cached_prefix_tokens": r.cached_prefix_tokens,
        })
    ttfts = [r.ttft for r in records]
    norm_in = [r.norm_input_latency for r in records]
    norm_out = [r.norm_output_latency for r in records]
    first_arrival = min(r.arrival for r in records)
    makespan = max(result.makespan - first_arrival, 1e-9)
    out_tokens = sum(r.output_len for r in records)
    total_tokens = sum(r.input_len + r.output_len for r in records)
    slo_doc = None
    if slo is not None:
        ok_in = nearest_rank(sorted(norm_in), 90) <= slo.slo_input
        ok_out = nearest_rank(sorted(norm_out), 90) <= slo.slo_output
        attained = sum(1 for r in records
                       if r.norm_input_latency <= slo.slo_input
                       and r.norm_output_latency <= slo.slo_output)
        slo_doc = {
            "input_target": slo.slo_input,
            "output_target": slo.slo_output,
            "scale": slo.scale,
            "attainment": attained / len(records),
            "p90_ok": bool(ok_in and ok_out),
        }
    return MetricsReport(
        policy=result.policy, seed=result.seed, empty=False, request_rows=rows,
        aggregates={
            "ttft": summarize(ttfts),
            "norm_input_latency": summarize(norm_in),
            "norm_output_latency": summarize(norm_out),
        },
        throughput={
            "completed": len(records),
            "makespan_seconds": makespan,
            "requests_per_second": len(records) / makespan,
            "output_tokens_per_second": out_tokens / makespan,
            "total_tokens_per_second": total_tokens / makespan,
        },
        slo=slo_doc,
        cache=result.cache_stats,
        operations=result.counters,
        ttft_components={
            "queue_wait_mean": sum(r.queue_wait for r in records) / len(records),
            "encode_mean": sum(r.encode_time for r in records) / len(records),
            "prefill_mean": sum(r.prefill_time for r in records) / len(records),
            "migration_mean": sum(r.migration_wait for r in records) / len(records),
        })


def calibrate_light_load(dataset: DatasetProfile, profile: CostProfile,
                         base_config: RunConfig | None = None, seed: int = 7,
                         qps: float = 0.2, horizon: float = 300.0) -> tuple[float, float]:
    """Light-load normalized latencies of the coupled reference system.

    These anchor the SLO targets so every policy is judged against the same
    absolute latency budget.
    """
    cfg = config_for_policy("coupled", base_config)
    trace = generate(dataset, qps, horizon, seed)
    result = run(trace, "coupled", profile, cfg, seed=seed)
    report = aggregate(result)
    return (report.aggregates["norm_input_latency"]["mean"],
            report.aggregates["norm_output_latency"]["mean"])


def slo_from_calibration(light_input: float, light_output: float,
                         scale: float) -> SloConfig:
    return SloConfig(light_load_latency_input=light_input,
                     light_load_latency_output=light_output, scale=scale)


@dataclass
class ThroughputSearch:
    max_qps: float
    probes: int
    diagnostic: str


def max_throughput_under_slo(probe, lo: float, hi: float,
                             resolution: float = 0.1) -> ThroughputSearch:
    """Highest QPS whose run meets the P90 SLO criterion, by bisection.

    `probe(qps) -> bool` must be deterministic (fixed seed per probe).
    Probe count is bounded by ceil(log2(range / resolution)) + 2.
    """
    if hi < lo:
        raise ValueError("search range is inverted")
    probes = 1
    if not probe(lo):
        return ThroughputSearch(0.0, probes, "even the minimum QPS violates the SLO")
    probes += 1
    if probe(hi):
        return ThroughputSearch(hi, probes, "entire range meets the SLO")
    while hi - lo > resolution:
        mid = (lo + hi) / 2.0
        probes += 1
        if probe(mid):
            lo = mid
        else:
            hi = mid
    return ThroughputSearch(lo, probes, "converged")


def make_slo_probe(policy: str, dataset: DatasetProfile, profile: CostProfile,
                   slo: SloConfig, config: RunConfig, seed: int,
                   horizon: float, bursts: list[BurstSpec] | None = None):
    """Build the deterministic QPS probe used by the throughput search."""

    def probe(qps: float) -> bool:
        trace = generate(dataset, qps, horizon, seed, bursts)
        if not trace:
            return True
        result = run(trace, policy, profile, config, slo.slo_input, seed)
        report = aggregate(result, slo)
        return bool(report.slo and report.slo["p90_ok"])

    return probe
