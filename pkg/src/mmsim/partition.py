"""Stage-level scheduling decisions.

Pure functions over value views of engine state: FCFS dispatch under memory
and compute budgets, the instance-allocation and auto-scaling gain/cost
models, and the DP-first parallelism rule. The engine calls these on every
scheduler pass and executes whatever they return.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .balancer import PreemptionCandidate, reactive_scale
from .core import MmsimError
from .costmodel import CostProfile


class FootprintTooLarge(MmsimError):
    pass


INFINITE_COST = math.inf


# --- request dispatching ---

@dataclass(frozen=True)
class DispatchItem:
    request_id: int
    input_tokens: int
    priority: bool = False


def dispatch(queue: list[DispatchItem], free_kv_slots: int,
             tipping_budget: int) -> list[int]:
    """Select the prefill set from the pending queue.

    FCFS, except priority-hint requests (text dialogues redirected into the
    multimodal group) jump ahead. Admission stops entirely at the first
    request that would overflow the free KV slots or push total batch tokens
    past the tipping budget; requests are never split. An empty result is a
    valid outcome.
    """
    ordered = [item for item in queue if item.priority] + \
              [item for item in queue if not item.priority]
    admitted: list[int] = []
    used_kv = 0
    total_tokens = 0
    for item in ordered:
        if used_kv + item.input_tokens > free_kv_slots:
            break
        if total_tokens + item.input_tokens > tipping_budget:
            break
        admitted.append(item.request_id)
        used_kv += item.input_tokens
        total_tokens += item.input_tokens
    return admitted


# --- gain / cost models ---

@dataclass(frozen=True)
class DecodeBatchView:
    """Value snapshot of a group's decode batch for cost evaluation."""

    output_lens: tuple[int, ...]       # full per-request output lengths
    remaining_output: int              # sum of not-yet-decoded tokens
    resident_kv: int                   # total resident KV tokens of the batch
    n_instances: int


@dataclass(frozen=True)
class PrefillBatchView:
    """Value snapshot of a running prefill batch for cost evaluation."""

    input_lens: tuple[int, ...]        # full per-request input lengths
    batch_tokens: int                  # tokens the batch is computing
    n_instances: int


def gain_prefill(profile: CostProfile, batch_tokens: int,
                 input_lens: tuple[int, ...] | list[int], n_instances: int) -> float:
    """Per-token acceleration from granting one more instance to a prefill set."""
    if not input_lens:
        return 0.0
    t_now = profile.prefill_time(batch_tokens, n_instances)
    t_plus = profile.prefill_time(batch_tokens, n_instances + 1)
    delta = t_now - t_plus
    return sum(delta / max(1, length) for length in input_lens)


def cost_prefill_preempt(profile: CostProfile, batch: DecodeBatchView,
                         victim_kv_used: int, penalty_w: float) -> float:
    """Per-token cost of taking one instance away from a decode batch.

    Migration of the victim's resident KV plus the penalty-weighted
    slowdown of the shrunk batch, spread over the batch's output lengths.
    Taking the last decode instance is forbidden (infinite cost).
    """
    if batch.n_instances <= 1:
        return INFINITE_COST
    migration = profile.migration_cost(victim_kv_used)
    slowdown = profile.decode_degradation(
        batch_size=len(batch.output_lens), resident_kv=batch.resident_kv,
        remaining_output=batch.remaining_output,
        n_before=batch.n_instances, n_after=batch.n_instances - 1)
    per_instance_cost = migration + penalty_w * slowdown
    return sum(per_instance_cost / max(1, length) for length in batch.output_lens)


def gain_decode_scale(profile: CostProfile, batch: DecodeBatchView,
                      avg_latency_per_token: float) -> float:
    """Per-token gain of adding one instance to a bottlenecked decode batch."""
    if not batch.output_lens:
        return 0.0
    projected = profile.decode_step_time(
        len(batch.output_lens), batch.n_instances + 1, batch.resident_kv)
    delta = avg_latency_per_token - projected
    return sum(delta / max(1, length) for length in batch.output_lens)


def cost_decode_scale_prefill_victim(profile: CostProfile, victim: PrefillBatchView,
                                     victim_kv_used: int, penalty_w: float) -> float:
    """Per-token cost of pulling one instance out of a running prefill batch."""
    if victim.n_instances <= 1:
        return INFINITE_COST
    migration = profile.migration_cost(victim_kv_used)
    slowdown = profile.prefill_degradation(
        victim.batch_tokens, victim.n_instances, victim.n_instances - 1)
    per_instance_cost = migration + penalty_w * slowdown
    return sum(per_instance_cost / max(1, length) for length in victim.input_lens)


# --- elastic instance allocation ---

@dataclass(frozen=True)
class PrefillRequestSpec:
    request_id: int
    kv_need: int          # reservation: input plus output tokens
    input_len: int        # full input length (gain normalizer)
    prefill_tokens: int   # tokens the batch will actually compute


@dataclass(frozen=True)
class InstanceSlot:
    instance_id: int
    kv_headroom: int


@dataclass(frozen=True)
class DecodeVictim:
    instance_id: int
    kv_unused: int        # capacity minus resident KV, the e-max ranking key
    kv_used: int          # resident KV that a preemption must migrate
    capacity: int
    migratable: bool      # residents can be rehomed inside the pool


@dataclass
class PrefillAllocation:
    instance_ids: list[int] = field(default_factory=list)
    placements: dict[int, int] = field(default_factory=dict)  # request -> instance
    preempted: list[int] = field(default_factory=list)
    forced_preempted: list[int] = field(default_factory=list)
    dropped: list[int] = field(default_factory=list)
    decisions: list[dict] = field(default_factory=list)


def place_reservations(requests: list[PrefillRequestSpec],
                       headroom: dict[int, int]) -> dict[int, int] | None:
    """Best-fit packing of request reservations onto instance headroom.

    Packing tightly (smallest sufficient slot first) concentrates decode
    residency on few instances so the rest can go back to idle untouched.
    """
    remaining = dict(headroom)
    placements: dict[int, int] = {}
    for spec in requests:
        slots = [(free, iid) for iid, free in remaining.items() if free >= spec.kv_need]
        if not slots:
            return None
        _, iid = min(slots)
        placements[spec.request_id] = iid
        remaining[iid] -= spec.kv_need
    return placements


def allocate_prefill(profile: CostProfile, requests: list[PrefillRequestSpec],
                     idle: list[InstanceSlot], decode_victims: list[DecodeVictim],
                     decode_batch: DecodeBatchView, penalty_w: float,
                     max_instances: int | None = None,
                     extra_homes: list[InstanceSlot] | None = None) -> PrefillAllocation:
    """Assign instances to a dispatched prefill set.

    Idle instances are granted as compute; reservations may land on them or
    on `extra_homes` (the decode pool, where KV settles anyway). If the
    combined slots cannot host the set, decode instances are preempted in
    max-unused-slot order regardless of cost (memory-forced). Afterwards the
    allocator keeps preempting the current best victim while the modelled
    speedup gain exceeds the migration-plus-degradation cost, stopping at
    the first non-beneficial candidate. When even full preemption cannot
    host the set, the FCFS tail is dropped and placement retried.
    """
    alloc = PrefillAllocation()
    if not requests:
        return alloc

    limit = max_instances if max_instances is not None else \
        max(1, len(idle) + len(decode_victims))
    compute = sorted(idle, key=lambda s: (-s.kv_headroom, s.instance_id))[:max(1, limit)]
    compute_ids = [slot.instance_id for slot in compute]
    headroom = {slot.instance_id: slot.kv_headroom for slot in compute}
    for slot in extra_homes or []:
        headroom.setdefault(slot.instance_id, slot.kv_headroom)
    candidates = sorted((v for v in decode_victims if v.migratable),
                        key=lambda v: (-v.kv_unused, v.instance_id))
    pool = decode_batch

    working = list(requests)
    placements = place_reservations(working, headroom)

    # forced preemptions: no compute instance at all, or the combined KV
    # slots cannot host the set; grab e-max until satisfied or out of prey
    def unsatisfied():
        return placements is None or not compute_ids

    while unsatisfied() and working:
        took = False
        while candidates and len(compute_ids) < limit:
            if pool.n_instances <= 1:
                break
            victim = candidates.pop(0)
            cost = cost_prefill_preempt(profile, pool, victim.kv_used, penalty_w)
            headroom[victim.instance_id] = victim.capacity
            compute_ids.append(victim.instance_id)
            alloc.preempted.append(victim.instance_id)
            alloc.forced_preempted.append(victim.instance_id)
            alloc.decisions.append({
                "kind": "preempt_for_prefill", "instance": victim.instance_id,
                "forced": True, "gain": None, "cost": cost})
            pool = DecodeBatchView(pool.output_lens, pool.remaining_output,
                                   pool.resident_kv, pool.n_instances - 1)
            took = True
            placements = place_reservations(working, headroom)
            if not unsatisfied():
                break
        if not unsatisfied():
            break
        if not compute_ids and not candidates:
            # nothing can compute this batch at all
            alloc.dropped.extend(spec.request_id for spec in working)
            working = []
            break
        if not took:
            # cannot satisfy memory: shrink the set from its FCFS tail
            alloc.dropped.append(working.pop().request_id)
            placements = place_reservations(working, headroom)

    if not working or placements is None:
        alloc.dropped.extend(spec.request_id for spec in working)
        alloc.preempted.clear()
        alloc.forced_preempted.clear()
        alloc.decisions.clear()
        return alloc

    # opportunistic preemptions: keep adding e-max while gain beats cost
    batch_tokens = sum(spec.prefill_tokens for spec in working)
    input_lens = [spec.input_len for spec in working]
    while candidates and len(compute_ids) < limit:
        victim = candidates[0]
        if pool.n_instances <= 1:
            break
        gain = gain_prefill(profile, batch_tokens, input_lens, len(compute_ids))
        cost = cost_prefill_preempt(profile, pool, victim.kv_used, penalty_w)
        if gain <= cost:
            break
        candidates.pop(0)
        headroom[victim.instance_id] = victim.capacity
        compute_ids.append(victim.instance_id)
        alloc.preempted.append(victim.instance_id)
        alloc.decisions.append({
            "kind": "preempt_for_prefill", "instance": victim.instance_id,
            "forced": False, "gain": gain, "cost": cost})
        pool = DecodeBatchView(pool.output_lens, pool.remaining_output,
                               pool.resident_kv, pool.n_instances - 1)
        placements = place_reservations(working, headroom)

    alloc.instance_ids = sorted(compute_ids)
    alloc.placements = placements
    return alloc


# --- elastic auto-scaling ---

@dataclass(frozen=True)
class ScaleDecision:
    action: str                    # idle | intra | inter | none
    instance_id: int | None = None
    gain: float = 0.0
    cost: float = 0.0
    reason: str = ""


def autoscale_decode(profile: CostProfile, batch: DecodeBatchView,
                     avg_latency_per_token: float, idle_instances: list[int],
                     intra_victim: PrefillBatchView | None, intra_instance: int | None,
                     intra_kv_used: int,
                     inter_candidates: list[PreemptionCandidate],
                     penalty_w: float) -> ScaleDecision:
    """Pick how a bottlenecked decode batch acquires one more instance.

    Idle same-group instances win unconditionally. Otherwise the intra-group
    prefill victim and the cheapest inter-group candidate are scored by net
    gain; the better positive one is taken, else no scaling happens.
    """
    if idle_instances:
        return ScaleDecision(action="idle", instance_id=min(idle_instances),
                             reason="idle same-group instance")

    gain = gain_decode_scale(profile, batch, avg_latency_per_token)
    best = ScaleDecision(action="none", gain=gain, reason="no beneficial candidate")
    best_net = 0.0

    if intra_victim is not None and intra_instance is not None:
        cost = cost_decode_scale_prefill_victim(profile, intra_victim, intra_kv_used, penalty_w)
        if gain - cost > best_net:
            best_net = gain - cost
            best = ScaleDecision(action="intra", instance_id=intra_instance,
                                 gain=gain, cost=cost, reason="intra-group prefill preemption")

    chosen = reactive_scale(inter_candidates, gain)
    if chosen is not None and gain - chosen.cost > best_net:
        best_net = gain - chosen.cost
        best = ScaleDecision(action="inter", instance_id=chosen.instance_id,
                             gain=gain, cost=chosen.cost,
                             reason=f"inter-group preemption from group {chosen.group_id}")
    return best


# --- parallelism rule ---

@dataclass(frozen=True)
class ParallelPlan:
    tp_size: int
    dp_replicas: int
    used_instances: int
    returned_idle: int


def choose_parallelism(instance_count: int, model_footprint_gb: float,
                       instance_memory_gb: float) -> ParallelPlan:
    """Data parallelism over everything granted; tensor parallelism only
    when one instance cannot hold the weights, in minimal even set sizes.
    Leftover instances that cannot form a full set go back to idle."""
    if instance_count < 1:
        raise FootprintTooLarge("no instances granted")
    if model_footprint_gb <= instance_memory_gb:
        return ParallelPlan(tp_size=1, dp_replicas=instance_count,
                            used_instances=instance_count, returned_idle=0)
    tp = math.ceil(model_footprint_gb / instance_memory_gb)
    if tp > 1 and tp % 2 == 1:
        tp += 1
    replicas = instance_count // tp
    if replicas == 0:
        raise FootprintTooLarge(
            f"model needs {tp} instances per replica, only {instance_count} granted")
    used = replicas * tp
    return ParallelPlan(tp_size=tp, dp_replicas=replicas,
                        used_instances=used, returned_idle=instance_count - used)
