"""Canned experiment grids: latency sweeps, SLO throughput, ablations.

Shared by the CLI and the acceptance suite so both exercise exactly the
same code paths. Every run in a grid is independent; sweeps may fan out
across processes.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from importlib import resources

from .core import SloConfig
from .costmodel import CostProfile
from .engine import RunConfig, config_for_policy, run
from .metrics import (aggregate, make_slo_probe, max_throughput_under_slo,
                      slo_from_calibration)
from .workload import BurstSpec, DatasetProfile, generate

PACKAGED_COST_PROFILES = {"default": "default_cost.json"}
PACKAGED_DATASET_PROFILES = {
    "sharegpt4o-like": "sharegpt4o_like.json",
    "visualwebinstruct-like": "visualwebinstruct_like.json",
}


def _packaged(path_name: str) -> str:
    return str(resources.files("mmsim.profiles").joinpath(path_name))


def resolve_cost_profile(name_or_path: str) -> CostProfile:
    if name_or_path in PACKAGED_COST_PROFILES:
        return CostProfile.from_file(_packaged(PACKAGED_COST_PROFILES[name_or_path]))
    return CostProfile.from_file(name_or_path)


def resolve_dataset_profile(name_or_path: str) -> DatasetProfile:
    if name_or_path in PACKAGED_DATASET_PROFILES:
        return DatasetProfile.from_file(
            _packaged(PACKAGED_DATASET_PROFILES[name_or_path]))
    return DatasetProfile.from_file(name_or_path)


def run_policy(policy: str, trace, cost: CostProfile, slo: SloConfig | None,
               base_config: RunConfig | None = None, seed: int = 0, **overrides):
    cfg = config_for_policy(policy, base_config, **overrides)
    slo_input = slo.slo_input if slo is not None else float("inf")
    return run(trace, policy, cost, cfg, slo_input, seed)


def _latency_cell(args) -> dict:
    (policy, qps, dataset, cost, slo, base_config, seed, horizon,
     bursts, overrides) = args
    trace = generate(dataset, qps, horizon, seed, bursts)
    result = run_policy(policy, trace, cost, slo, base_config, seed, **overrides)
    report = aggregate(result, slo)
    agg = report.aggregates
    return {
        "policy": policy, "qps": qps, "seed": seed,
        "completed": report.throughput["completed"],
        "mean_ttft": agg["ttft"]["mean"], "p50_ttft": agg["ttft"]["p50"],
        "p90_ttft": agg["ttft"]["p90"], "p99_ttft": agg["ttft"]["p99"],
        "mean_norm_input": agg["norm_input_latency"]["mean"],
        "p90_norm_input": agg["norm_input_latency"]["p90"],
        "mean_norm_output": agg["norm_output_latency"]["mean"],
        "p90_norm_output": agg["norm_output_latency"]["p90"],
        "requests_per_second": report.throughput["requests_per_second"],
        "output_tokens_per_second": report.throughput["output_tokens_per_second"],
        "slo_attainment": report.slo["attainment"] if report.slo else None,
        "preemptions_opportunistic": report.operations["preemptions_opportunistic"],
        "migrations": report.operations["migrations"],
    }

LATENCY_COLUMNS = [
    "policy", "qps", "seed", "completed", "mean_ttft", "p50_ttft", "p90_ttft",
    "p99_ttft", "mean_norm_input", "p90_norm_input", "mean_norm_output",
    "p90_norm_output", "requests_per_second", "output_tokens_per_second",
    "slo_attainment", "preemptions_opportunistic", "migrations",
]


def latency_sweep(policies: list[str], qps_points: list[float],
                  dataset: DatasetProfile, cost: CostProfile,
                  slo: SloConfig | None, base_config: RunConfig | None = None,
                  seed: int = 1, horizon: float = 120.0,
                  bursts: list[BurstSpec] | None = None,
                  overrides_by_policy: dict[str, dict] | None = None,
                  workers: int = 1) -> list[dict]:
    """One row per (policy, qps); rows come back in grid order."""
    overrides_by_policy = overrides_by_policy or {}
    cells = [(p, q, dataset, cost, slo, base_config, seed, horizon, bursts,
              overrides_by_policy.get(p, {}))
             for p in policies for q in qps_points]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_latency_cell, cells))
    return [_latency_cell(c) for c in cells]


THROUGHPUT_COLUMNS = ["policy", "slo_scale", "max_qps", "probes", "diagnostic"]


def throughput_vs_slo_scale(policies: list[str], scales: list[float],
                            dataset: DatasetProfile, cost: CostProfile,
                            light_load: tuple[float, float],
                            base_config: RunConfig | None = None, seed: int = 1,
                            horizon: float = 120.0, qps_range=(0.2, 6.4),
                            bursts: list[BurstSpec] | None = None,
                            overrides_by_policy: dict[str, dict] | None = None,
                            ) -> list[dict]:
    """Fig-7-shaped grid: max QPS meeting the SLO per policy and scale."""
    overrides_by_policy = overrides_by_policy or {}
    rows = []
    for policy in policies:
        for scale in scales:
            slo = slo_from_calibration(light_load[0], light_load[1], scale)
            cfg = config_for_policy(policy, base_config,
                                    **overrides_by_policy.get(policy, {}))
            probe = make_slo_probe(policy, dataset, cost, slo, cfg, seed, horizon,
                                   bursts)
            found = max_throughput_under_slo(probe, qps_range[0], qps_range[1])
            rows.append({"policy": policy, "slo_scale": scale,
                         "max_qps": found.max_qps, "probes": found.probes,
                         "diagnostic": found.diagnostic})
    return rows


ALLOCATION_VARIANTS = {
    "elastic-dynamic": ("elastic", {}),
    "static-text-dominant": ("static", {"static_mm_fraction": 0.375,
                                        "cache_enabled": True}),
    "static-equal": ("static", {"static_mm_fraction": 0.5,
                                "cache_enabled": True}),
    "static-mm-dominant": ("static", {"static_mm_fraction": 0.625,
                                      "cache_enabled": True}),
}

ALLOCATION_COLUMNS = ["variant", "policy", "slo_scale", "max_qps", "probes"]


def allocation_ablation(dataset: DatasetProfile, cost: CostProfile,
                        light_load: tuple[float, float],
                        base_config: RunConfig | None = None, seed: int = 1,
                        horizon: float = 120.0, scales=(2.0,),
                        qps_range=(0.2, 6.4),
                        bursts: list[BurstSpec] | None = None) -> list[dict]:
    """Dynamic allocation vs the three static splits on a bursty workload."""
    if bursts is None:
        bursts = [BurstSpec(start_time=horizon * 0.3, duration=horizon * 0.25,
                            rate_multiplier=3.0, modality_target="multimodal")]
    rows = []
    for variant, (policy, overrides) in ALLOCATION_VARIANTS.items():
        for scale in scales:
            slo = slo_from_calibration(light_load[0], light_load[1], scale)
            cfg = config_for_policy(policy, base_config, **overrides)
            probe = make_slo_probe(policy, dataset, cost, slo, cfg, seed,
                                   horizon, bursts)
            found = max_throughput_under_slo(probe, qps_range[0], qps_range[1])
            rows.append({"variant": variant, "policy": policy, "slo_scale": scale,
                         "max_qps": found.max_qps, "probes": found.probes})
    return rows


OPTIMIZATION_VARIANTS = {
    "emp-only": {"cache_enabled": False, "blocking_encode": True},
    "unicache": {"cache_enabled": True, "blocking_encode": True},
    "full": {"cache_enabled": True, "blocking_encode": False},
}

OPTIMIZATION_COLUMNS = ["variant", "qps", "mean_ttft", "p90_ttft",
                        "mean_norm_input", "p90_norm_input"]


def optimization_ablation(dataset: DatasetProfile, cost: CostProfile,
                          slo: SloConfig | None,
                          base_config: RunConfig | None = None, seed: int = 1,
                          horizon: float = 120.0,
                          qps_points=(0.5, 1.0, 1.5)) -> list[dict]:
    """Stack the two inference optimizations on top of the elastic core."""
    rows = []
    for variant, overrides in OPTIMIZATION_VARIANTS.items():
        for qps in qps_points:
            trace = generate(dataset, qps, horizon, seed)
            result = run_policy("elastic", trace, cost, slo, base_config, seed,
                                **overrides)
            report = aggregate(result, slo)
            agg = report.aggregates
            rows.append({
                "variant": variant, "qps": qps,
                "mean_ttft": agg["ttft"]["mean"],
                "p90_ttft": agg["ttft"]["p90"],
                "mean_norm_input": agg["norm_input_latency"]["mean"],
                "p90_norm_input": agg["norm_input_latency"]["p90"],
            })
    return rows


def write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join("" if row.get(c) is None else str(row.get(c))
                              for c in columns) + "\n")
