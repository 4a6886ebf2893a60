"""Modality-level manager: proactive allocation and reactive scaling.

Proactive allocation maximizes the minimum burst tolerance across groups
with a greedy loop (each instance goes to the group currently worst off).
Reactive scaling picks the cheapest foreign instance to preempt when a
group signals a shortage the partition layer cannot cover internally.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

from .core import MmsimError
from .costmodel import CostProfile


class UndefinedTolerance(MmsimError):
    pass


class InsufficientInstances(MmsimError):
    pass


def burst_tolerance(n_assigned: int, avg_required: int) -> float:
    """Assigned capacity relative to a group's average requirement."""
    if avg_required < 1:
        raise UndefinedTolerance("burst tolerance undefined for avg_required < 1")
    return n_assigned / avg_required


@dataclass
class AllocationPlan:
    counts: dict[int, int]
    unassigned: int
    min_tolerance: float
    # (group_id, tolerance_before_assignment) per greedy step, for auditing
    steps: list[tuple[int, float]] = field(default_factory=list)


def proactive_allocate(avg_required: dict[int, int], total_instances: int) -> AllocationPlan:
    """Greedy maximin split of total_instances across modality groups.

    Groups with avg_required >= 1 participate in the maximin; ties go to the
    lower group id. Groups with no measured demand receive nothing here and
    the caller decides what to do with any unassigned pool.
    """
    active = sorted(g for g, req in avg_required.items() if req >= 1)
    counts = {g: 0 for g in avg_required}
    if not active:
        return AllocationPlan(counts=counts, unassigned=total_instances,
                              min_tolerance=math.inf)
    if total_instances < len(active):
        raise InsufficientInstances(
            f"{total_instances} instances cannot cover {len(active)} active groups")

    steps: list[tuple[int, float]] = []
    for _ in range(total_instances):
        chosen = min(active, key=lambda g: (burst_tolerance(counts[g], avg_required[g]), g))
        steps.append((chosen, burst_tolerance(counts[chosen], avg_required[chosen])))
        counts[chosen] += 1
    min_bt = min(burst_tolerance(counts[g], avg_required[g]) for g in active)
    return AllocationPlan(counts=counts, unassigned=0, min_tolerance=min_bt, steps=steps)


def assign_idle_instances(avg_required: dict[int, int], busy_counts: dict[int, int],
                          idle_instance_ids: list[int]) -> dict[int, int]:
    """Incremental variant used online: re-home only idle instances.

    Busy instances stay where they are; each idle instance joins the group
    with the lowest current burst tolerance. Returns group_id -> target
    count of idle instances to receive.
    """
    active = sorted(g for g, req in avg_required.items() if req >= 1)
    grants = {g: 0 for g in avg_required}
    if not active:
        return grants
    counts = {g: busy_counts.get(g, 0) for g in avg_required}
    for _ in idle_instance_ids:
        chosen = min(active, key=lambda g: (burst_tolerance(counts[g], avg_required[g]), g))
        counts[chosen] += 1
        grants[chosen] += 1
    return grants


@dataclass(frozen=True)
class PreemptionCandidate:
    """A foreign instance reactive scaling may take, with its modelled cost."""

    instance_id: int
    group_id: int
    cost: float
    migration_seconds: float
    reason: str


def reactive_scale(candidates: list[PreemptionCandidate],
                   requester_gain: float) -> PreemptionCandidate | None:
    """Pick the minimal-impact foreign instance, or None.

    Candidates are built by the partition layer (it knows each victim's
    current batch); an idle foreign instance has cost zero and dominates.
    Returns None when even the cheapest candidate's cost reaches the
    requesting side's computed gain.
    """
    if not candidates:
        return None
    best = min(candidates, key=lambda c: (c.cost, c.migration_seconds, c.instance_id))
    if best.cost >= requester_gain:
        return None
    return best


class LoadEstimator:
    """Sliding-window arrival-load estimator feeding avg/peak requirements.

    Converts arrivals into per-request light-load service seconds via the
    cost profile, then reads average demand as work divided by the window
    and peak demand as the busiest bucket.
    """

    def __init__(self, profile: CostProfile, window_seconds: float = 60.0,
                 bucket_seconds: float = 5.0):
        self.profile = profile
        self.window = window_seconds
        self.bucket = bucket_seconds
        self._events: deque[tuple[float, float]] = deque()

    def service_seconds(self, input_tokens: int, image_tokens: int, output_tokens: int) -> float:
        seconds = input_tokens / self.profile.prefill_rate
        # decode amortizes across a batch packed up to the profiling threshold
        per_token = (self.profile.decode_base / self.profile.decode_batch_threshold
                     + self.profile.decode_batch_coeff)
        seconds += output_tokens * per_token
        if image_tokens > 0:
            seconds += image_tokens / self.profile.encode_rate
        return seconds

    def observe(self, now: float, input_tokens: int, image_tokens: int,
                output_tokens: int) -> None:
        self._events.append((now, self.service_seconds(input_tokens, image_tokens, output_tokens)))
        self._drop_old(now)

    def _drop_old(self, now: float) -> None:
        cutoff = now - self.window
        while self._events and self._events[0][0] < cutoff:
            self._events.popleft()

    def avg_required(self, now: float) -> int:
        self._drop_old(now)
        work = sum(s for _, s in self._events)
        return max(1, math.ceil(work / self.window))

    def peak_required(self, now: float) -> int:
        self._drop_old(now)
        if not self._events:
            return 1
        buckets: dict[int, float] = {}
        for t, s in self._events:
            buckets[int(t // self.bucket)] = buckets.get(int(t // self.bucket), 0.0) + s
        peak_work = max(buckets.values())
        return max(1, math.ceil(peak_work / self.bucket))
