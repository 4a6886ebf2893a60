"""Analytic latency and cost surrogates driving every scheduling decision.

All functions are pure and parameterized by a CostProfile loaded from JSON.
Stage timing uses the simplest forms with the right qualitative shape:
Amdahl-style sublinear speedup for encode/prefill, near-flat share-based
scaling for decode, and linear KV migration cost.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

from .core import ImageInput, MmsimError


class InvalidParallelism(MmsimError):
    pass


class NoInstances(MmsimError):
    pass


class NothingToEncode(MmsimError):
    pass


class CannotShrinkToZero(MmsimError):
    pass


@dataclass(frozen=True)
class CostProfile:
    """Calibrated rates and coefficients for the analytic latency model.

    encode_rate         image tokens encoded per second on one instance
    prefill_rate        input tokens prefillled per second on one instance
    decode_base         seconds per decode step at batch size 1
    decode_batch_coeff  added seconds per step per extra batched request
                        sharing an instance
    decode_kv_coeff     added seconds per step per 1k resident KV tokens
                        per instance
    parallel_alpha      serial fraction in [0, 1) for encode/prefill scaling
    migration_bandwidth KV token slots moved per second between instances
    kv_bytes_per_token  informational only (reporting)
    penalty_w           preemption-aggressiveness penalty, >= 0
    decode_batch_threshold  per-instance batch share beyond which decode is
                        considered bottlenecked (offline-profiling surrogate)
    prefill_model       "linear" only; "quadratic" is a declared stub
    """

    encode_rate: float
    prefill_rate: float
    decode_base: float
    decode_batch_coeff: float
    decode_kv_coeff: float
    parallel_alpha: float
    migration_bandwidth: float
    kv_bytes_per_token: int
    penalty_w: float
    decode_batch_threshold: int
    prefill_model: str = "linear"

    def __post_init__(self):
        for name in ("encode_rate", "prefill_rate", "decode_base", "migration_bandwidth"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not 0.0 <= self.parallel_alpha < 1.0:
            raise ValueError("parallel_alpha must be in [0, 1)")
        if self.penalty_w < 0:
            raise ValueError("penalty_w must be >= 0")
        if self.decode_batch_coeff < 0 or self.decode_kv_coeff < 0:
            raise ValueError("decode coefficients must be >= 0")
        if self.decode_batch_threshold < 1:
            raise ValueError("decode_batch_threshold must be >= 1")
        if self.prefill_model == "quadratic":
            raise NotImplementedError("quadratic prefill model is a config stub")
        if self.prefill_model != "linear":
            raise ValueError(f"unknown prefill_model {self.prefill_model!r}")

    @classmethod
    def from_file(cls, path: str) -> "CostProfile":
        """Load a profile from JSON. Every field is required; no defaults."""
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        required = {f.name for f in fields(cls)} - {"prefill_model"}
        missing = required - doc.keys()
        if missing:
            raise ValueError(f"cost profile {path} missing fields: {sorted(missing)}")
        unknown = doc.keys() - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"cost profile {path} has unknown fields: {sorted(unknown)}")
        return cls(**doc)

    def parallel_speedup(self, n: int) -> float:
        """Amdahl speedup of n instances: 1 at n=1, bounded by 1/alpha."""
        if n < 1:
            raise InvalidParallelism(f"instance count must be >= 1, got {n}")
        return 1.0 / (self.parallel_alpha + (1.0 - self.parallel_alpha) / n)

    def encode_time(self, images: list[ImageInput] | tuple[ImageInput, ...], n: int) -> float:
        if not images:
            raise NothingToEncode("encode called with no images")
        total = sum(img.token_count for img in images)
        return self.encode_tokens_time(total, n)

    def encode_tokens_time(self, image_tokens: int, n: int) -> float:
        if image_tokens <= 0:
            raise NothingToEncode("encode called with no image tokens")
        return (image_tokens / self.encode_rate) / self.parallel_speedup(n)

    def prefill_time(self, total_tokens: int, n_instances: int) -> float:
        """Batch prefill duration for total_tokens on n data-parallel instances."""
        if n_instances < 1:
            raise NoInstances("prefill needs at least one instance")
        if total_tokens <= 0:
            return 0.0
        return (total_tokens / self.prefill_rate) / self.parallel_speedup(n_instances)

    def decode_step_time(self, batch_size: int, n_instances: int, resident_kv: int = 0) -> float:
        """Seconds per generated token per request for a decode batch.

        Scaling with instances happens only through the per-instance batch
        share and per-instance KV residency; decode is memory-bound by
        construction.
        """
        if n_instances < 1:
            raise NoInstances("decode needs at least one instance")
        if batch_size < 1:
            raise MmsimError("decode step undefined for an empty batch")
        share = math.ceil(batch_size / n_instances)
        kv_per_instance = resident_kv / n_instances
        return (self.decode_base
                + self.decode_batch_coeff * share
                + self.decode_kv_coeff * (kv_per_instance / 1000.0))

    def migration_cost(self, kv_used: int) -> float:
        """Seconds to move kv_used resident KV tokens off an instance."""
        if kv_used <= 0:
            return 0.0
        return kv_used / self.migration_bandwidth

    def decode_degradation(self, batch_size: int, resident_kv: int,
                           remaining_output: int, n_before: int, n_after: int) -> float:
        """Added completion seconds for a decode batch shrunk to n_after instances.

        Per-step slowdown times the batch's total remaining output tokens,
        clamped at zero (growing the pool never counts as degradation).
        """
        if n_after < 1:
            raise CannotShrinkToZero("decode batch cannot run on zero instances")
        if batch_size < 1:
            return 0.0
        delta = (self.decode_step_time(batch_size, n_after, resident_kv)
                 - self.decode_step_time(batch_size, n_before, resident_kv))
        return max(0.0, delta * remaining_output)

    def prefill_degradation(self, total_tokens: int, n_before: int, n_after: int) -> float:
        """Added completion seconds for a prefill batch shrunk to n_after instances."""
        if n_after < 1:
            raise CannotShrinkToZero("prefill batch cannot run on zero instances")
        delta = self.prefill_time(total_tokens, n_after) - self.prefill_time(total_tokens, n_before)
        return max(0.0, delta)

    def tipping_point(self, n_instances: int, free_kv_slots: int,
                      slo_input: float, reference_input_len: float) -> int:
        """Batch token budget where prefill flips from memory- to compute-bound.

        The memory bound is the caller-supplied free KV slot count; the
        compute bound is the largest batch that still finishes inside the
        per-request SLO window (slo_input seconds/token at the reference
        request length). With the linear prefill model marginal throughput
        is flat, so the compute bound comes purely from that window.
        """
        if n_instances < 1:
            raise NoInstances("tipping point needs at least one instance")
        window = slo_input * reference_input_len
        compute_bound = self.prefill_rate * self.parallel_speedup(n_instances) * window
        if math.isinf(compute_bound):
            return int(free_kv_slots)
        return int(min(free_kv_slots, math.floor(compute_bound)))
