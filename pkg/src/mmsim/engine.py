"""Deterministic discrete-event engine for the serving cluster.

One event loop drives three policy drivers behind a common interface:

* elastic -- modality groups with proactive/reactive balancing, elastic
             prefill allocation, decode auto-scaling, KV-only migration,
             unified caching and non-blocking encoding.
* static  -- fixed modality split and fixed per-stage pools; no preemption,
             no scaling.
* coupled -- one shared pool of monolithic instances; encoding blocks the
             owning instance, continuous batching per instance.

Determinism: events are ordered by (time, insertion sequence); every
decision iterates sorted containers; nothing consumes randomness.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

from . import balancer as bal
from . import partition as part
from .cache import UnifiedCache
from .core import (ElasticInstance, InvalidTraceError, MmsimError, Modality,
                   Request, StageRole, validate_trace)
from .costmodel import CostProfile

EWMA_ALPHA = 2.0 / 33.0  # ~32-tick window for the decode latency average


class EmptyTrace(MmsimError):
    pass


class DeadlockDetected(MmsimError):
    pass


class ConfigError(MmsimError):
    pass


class InsufficientDestinationCapacity(MmsimError):
    pass


class EventKind(Enum):
    ARRIVAL = "RequestArrival"
    ENCODE_DONE = "EncodeDone"
    PREFILL_DONE = "PrefillDone"
    DECODE_STEP = "DecodeStep"
    MIGRATION_DONE = "MigrationDone"
    SCHEDULER_TICK = "SchedulerTick"


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


@dataclass
class RunConfig:
    """Cluster shape plus policy knobs, all in one place."""

    n_instances: int = 8
    kv_capacity: int = 240_000
    cache_budget_tokens: int = 600_000
    cache_image_fraction: float = 0.25
    cache_enabled: bool = True
    blocking_encode: bool = False
    autoscale_enabled: bool = True
    rebalance_enabled: bool = True
    migration_enabled: bool = True
    max_prefill_instances: int | None = None
    max_batch_tokens_per_instance: int = 16384
    encode_max_parallel: int = 4
    static_mm_fraction: float = 0.5
    balancer_window: float = 60.0
    min_instances_per_group: int = 1
    shrink_cooldown: float = 2.0
    model_footprint_gb: float = 16.0
    instance_memory_gb: float = 80.0
    check_invariants: bool = False
    collect_event_log: bool = False
    collect_audit: bool = False

    def copy_with(self, **kwargs) -> "RunConfig":
        doc = dict(self.__dict__)
        doc.update(kwargs)
        return RunConfig(**doc)


POLICY_PRESETS = {
    "elastic": {"cache_enabled": True, "blocking_encode": False},
    "static": {"cache_enabled": True, "blocking_encode": False},
    "coupled": {"cache_enabled": False, "blocking_encode": True},
}


def config_for_policy(policy: str, base: RunConfig | None = None,
                      **overrides) -> RunConfig:
    """Policy-appropriate defaults with caller overrides on top.

    Precedence: overrides > policy preset > base. Cache/blocking flags are
    policy traits, so flipping them for ablations must happen through the
    keyword overrides, not through `base`.
    """
    if policy not in POLICY_PRESETS:
        raise ConfigError(f"unknown policy {policy!r}")
    cfg = base if base is not None else RunConfig()
    merged = dict(POLICY_PRESETS[policy])
    merged.update(overrides)
    return cfg.copy_with(**merged)


@dataclass
class RequestState:
    req: Request
    group_id: int = 0
    phase: str = "queued"
    encode_start: float | None = None
    encode_done: float | None = None
    prefill_dispatch: float | None = None
    prefill_exec_start: float | None = None
    prefill_done: float | None = None
    completion: float | None = None
    decoded: int = 0
    home_instance: int | None = None
    cached_prefix: int = 0
    encode_computed_tokens: int = 0
    prefill_computed_tokens: int = 0
    encoded_total: int = 0
    prefilled_total: int = 0
    decoded_total: int = 0
    decode_gen: int = 0
    paused: bool = False
    prefix_handle: object = None
    pending_missed: list = field(default_factory=list)
    waiting_hashes: set = field(default_factory=set)

    @property
    def kv_need(self) -> int:
        return self.req.total_input_len + self.req.output_len

    @property
    def done(self) -> bool:
        return self.completion is not None


@dataclass
class PrefillBatch:
    batch_id: int
    group_id: int
    request_ids: list[int]
    instance_ids: list[int]
    total_tokens: int
    dispatch_time: float
    exec_start: float
    duration: float
    gen: int = 0
    finished: bool = False

    @property
    def end_time(self) -> float:
        return self.exec_start + self.duration


@dataclass
class GroupState:
    id: int
    modality: Modality
    members: set[int] = field(default_factory=set)
    encode_queue: list[int] = field(default_factory=list)
    ready_queue: list[int] = field(default_factory=list)
    decoding: dict[int, None] = field(default_factory=dict)
    paused: set[int] = field(default_factory=set)
    ewma_step: float | None = None
    active_encodes: int = 0
    pending_encodes: dict[str, list[int]] = field(default_factory=dict)
    last_shrink_time: float = -math.inf
    estimator: bal.LoadEstimator | None = None
    live_requests: int = 0
    avg_required: int = 1
    peak_required: int = 1

    def active_decode_count(self) -> int:
        return len(self.decoding) - len(self.paused)


@dataclass
class Migration:
    migration_id: int
    src_instance: int
    moves: dict[int, int]            # request -> destination instance
    after: tuple                     # ("idle",) | ("transfer", group) | ("prefill",)
    start: float
    duration: float
    reason: str


@dataclass
class RequestRecord:
    id: int
    modality: str
    priority_hint: bool
    arrival: float
    first_token: float
    completion: float
    input_len: int
    output_len: int
    queue_wait: float
    encode_time: float
    prefill_time: float
    migration_wait: float
    encoded_tokens: int
    prefilled_tokens: int
    decoded_tokens: int
    encode_computed_tokens: int
    prefill_computed_tokens: int
    cached_prefix_tokens: int

    @property
    def ttft(self) -> float:
        return self.first_token - self.arrival

    @property
    def norm_input_latency(self) -> float:
        return self.ttft / self.input_len

    @property
    def norm_output_latency(self) -> float:
        return (self.completion - self.first_token) / self.output_len


@dataclass
class RunResult:
    policy: str
    seed: int
    records: list[RequestRecord]
    counters: dict
    cache_stats: dict
    event_log: list[dict] | None
    audit: list[dict]
    makespan: float


class Engine:
    def __init__(self, trace: list[Request], policy: str, profile: CostProfile,
                 config: RunConfig | None = None, slo_input: float = math.inf,
                 seed: int = 0):
        if not trace:
            raise EmptyTrace("cannot simulate an empty trace")
        issues = validate_trace(trace)
        if issues:
            raise InvalidTraceError(issues)
        self.trace = trace
        self.policy_name = policy
        self.profile = profile
        self.cfg = config if config is not None else config_for_policy(policy)
        self.slo_input = slo_input
        self.seed = seed

        self.now = 0.0
        self._seq = 0
        self._heap: list[SimEvent] = []
        self._next_batch_id = 0
        self._next_migration_id = 0

        self.requests: dict[int, RequestState] = {}
        self.instances: dict[int, ElasticInstance] = {}
        self.reserved: dict[int, int] = {}
        self.reservation_of: dict[int, dict[int, int]] = {}  # inst -> req -> slots
        self.ledger: dict[int, dict[int, int]] = {}          # inst -> req -> kv tokens
        self.decode_added_at: dict[int, float] = {}
        self.compute_busy: set[int] = set()
        self.migrating: set[int] = set()
        self.inbound: dict[int, int] = {}
        self.groups: dict[int, GroupState] = {}
        self.batches: dict[int, PrefillBatch] = {}
        self.migrations: dict[int, Migration] = {}
        self.caches: dict[int, UnifiedCache] = {}

        self.counters = {
            "preemptions_opportunistic": 0, "preemptions_forced": 0,
            "migrations": 0, "scale_ups": 0, "scale_downs": 0,
            "inter_group_transfers": 0, "prefill_batches": 0,
            "encode_jobs": 0, "dropped_dispatches": 0,
        }
        self.audit: list[dict] = []
        self.event_log: list[dict] | None = [] if self.cfg.collect_event_log else None
        self.records: list[RequestRecord] = []

        if policy == "elastic":
            self.driver: _Driver = _ElasticDriver(self)
        elif policy == "static":
            self.driver = _StaticDriver(self)
        elif policy == "coupled":
            self.driver = _CoupledDriver(self)
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        self.driver.setup()

        for req in trace:
            self._push(req.arrival_time, EventKind.ARRIVAL, {"request": req.id})
            self.requests[req.id] = RequestState(req=req)

    # --- event plumbing ---

    def _push(self, time: float, kind: EventKind, payload: dict) -> None:
        heapq.heappush(self._heap, SimEvent(time, self._seq, kind, payload))
        self._seq += 1

    def _log(self, kind: EventKind, payload: dict) -> None:
        if self.event_log is not None:
            doc = {"time": self.now, "kind": kind.value}
            doc.update({k: v for k, v in payload.items() if k != "missed"})
            self.event_log.append(doc)

    def run(self) -> RunResult:
        handlers = {
            EventKind.ARRIVAL: self._handle_arrival,
            EventKind.ENCODE_DONE: self._handle_encode_done,
            EventKind.PREFILL_DONE: self._handle_prefill_done,
            EventKind.DECODE_STEP: self._handle_decode_step,
            EventKind.MIGRATION_DONE: self._handle_migration_done,
        }
        while self._heap:
            ev = heapq.heappop(self._heap)
            if ev.time < self.now:
                raise MmsimError(f"time travel: event at {ev.time} < clock {self.now}")
            self.now = ev.time
            self._log(ev.kind, ev.payload)
            handlers[ev.kind](ev)
            if self.cfg.check_invariants:
                self._check_conservation()
            self._scheduler_pass()
        incomplete = [rid for rid, st in self.requests.items() if not st.done]
        if incomplete:
            raise DeadlockDetected(
                f"no runnable event but {len(incomplete)} requests incomplete: "
                f"{sorted(incomplete)[:10]}; state: {self._dump_groups()}")
        makespan = max((r.completion for r in self.records), default=0.0)
        return RunResult(policy=self.policy_name, seed=self.seed,
                         records=sorted(self.records, key=lambda r: r.id),
                         counters=dict(self.counters),
                         cache_stats=self._merged_cache_stats(),
                         event_log=self.event_log, audit=self.audit,
                         makespan=makespan)

    def _dump_groups(self) -> str:
        bits = []
        for g in self.groups.values():
            bits.append(f"g{g.id}(enc={len(g.encode_queue)} rdy={len(g.ready_queue)} "
                        f"dec={len(g.decoding)} members={sorted(g.members)})")
        return " ".join(bits)

    def _scheduler_pass(self) -> None:
        self._log(EventKind.SCHEDULER_TICK, {})
        for _ in range(10_000):
            if not self.driver.pass_once():
                return
        raise MmsimError("scheduler pass did not reach a fixpoint")

    # --- shared state helpers ---

    def add_instance(self, inst_id: int, group_id: int) -> ElasticInstance:
        inst = ElasticInstance(id=inst_id, group=group_id,
                               kv_capacity=self.cfg.kv_capacity)
        self.instances[inst_id] = inst
        self.reserved[inst_id] = 0
        self.reservation_of[inst_id] = {}
        self.ledger[inst_id] = {}
        self.inbound[inst_id] = 0
        self.groups[group_id].members.add(inst_id)
        return inst

    def headroom(self, inst_id: int) -> int:
        return self.instances[inst_id].kv_capacity - self.reserved[inst_id]

    def reserve(self, inst_id: int, req_id: int, slots: int) -> None:
        self.reserved[inst_id] += slots
        self.reservation_of[inst_id][req_id] = slots

    def release_reservation(self, inst_id: int, req_id: int) -> None:
        slots = self.reservation_of[inst_id].pop(req_id)
        self.reserved[inst_id] -= slots

    def move_reservation(self, src: int, dst: int, req_id: int) -> None:
        slots = self.reservation_of[src].pop(req_id)
        self.reserved[src] -= slots
        self.reserved[dst] += slots
        self.reservation_of[dst][req_id] = slots

    def ledger_add(self, inst_id: int, req_id: int, tokens: int) -> None:
        self.ledger[inst_id][req_id] = tokens
        inst = self.instances[inst_id]
        inst.kv_used += tokens
        inst.resident_requests.add(req_id)

    def ledger_grow(self, inst_id: int, req_id: int) -> None:
        self.ledger[inst_id][req_id] += 1
        self.instances[inst_id].kv_used += 1

    def ledger_remove(self, inst_id: int, req_id: int) -> int:
        tokens = self.ledger[inst_id].pop(req_id)
        inst = self.instances[inst_id]
        inst.kv_used -= tokens
        inst.resident_requests.discard(req_id)
        return tokens

    def ledger_move(self, src: int, dst: int, req_id: int) -> None:
        tokens = self.ledger_remove(src, req_id)
        self.ledger_add(dst, req_id, tokens)

    def decode_pool(self, group: GroupState) -> list[int]:
        return sorted(i for i in group.members
                      if self.instances[i].stage_role is StageRole.DECODE)

    def idle_instances(self, group: GroupState) -> list[int]:
        return sorted(i for i in group.members
                      if self.instances[i].stage_role is StageRole.IDLE
                      and i not in self.migrating and self.inbound[i] == 0)

    def group_decode_resident_kv(self, group: GroupState) -> int:
        return sum(self.instances[i].kv_used for i in group.members
                   if self.instances[i].stage_role is StageRole.DECODE)

    def decode_step_seconds(self, group: GroupState) -> float:
        pool = self.decode_pool(group)
        active = group.active_decode_count()
        if not pool or active < 1:
            raise MmsimError("decode step undefined without pool or batch")
        return self.profile.decode_step_time(active, len(pool),
                                             self.group_decode_resident_kv(group))

    # --- cache helpers ---

    def cache_for(self, group_id: int) -> UnifiedCache | None:
        if not self.cfg.cache_enabled:
            return None
        return self.caches.get(group_id)

    def unified_sequence(self, req: Request) -> tuple[list, list[int]]:
        symbols: list = []
        weights: list[int] = []
        for img in req.images:
            symbols.append(("img", img.content_hash))
            weights.append(img.token_count)
        prefix_len = req.prefix_len if req.prefix_id is not None else 0
        for i in range(prefix_len):
            symbols.append(("pfx", req.prefix_id, i))
            weights.append(1)
        for i in range(req.text_input_len - prefix_len):
            symbols.append(("txt", req.id, i))
            weights.append(1)
        return symbols, weights

    def consult_image_cache(self, st: RequestState) -> list:
        """Return the images that still need encoding (cache misses)."""
        cache = self.cache_for(st.group_id)
        if cache is None:
            return list(st.req.images)
        missed = []
        for img in st.req.images:
            if cache.image_lookup(img.content_hash, self.now) is None:
                missed.append(img)
        return missed

    def split_encode_work(self, st: RequestState) -> tuple[list, set]:
        """Partition a request's images into own-encode work and waits.

        Cache hits cost nothing. A miss whose hash is already being encoded
        for an earlier request joins that encode as a waiter instead of
        re-encoding (the unified cache deduplicates in flight).
        """
        cache = self.cache_for(st.group_id)
        if cache is None:
            return list(st.req.images), set()
        group = self.groups[st.group_id]
        missed: list = []
        waiting: set = set()
        own: set = set()
        for img in st.req.images:
            h = img.content_hash
            if h in own or h in waiting:
                continue
            if cache.image_lookup(h, self.now) is not None:
                continue
            if h in group.pending_encodes:
                group.pending_encodes[h].append(st.req.id)
                waiting.add(h)
            else:
                group.pending_encodes[h] = []
                own.add(h)
                missed.append(img)
        return missed, waiting

    def admit_multimodal(self, st: RequestState) -> None:
        """Route an arriving multimodal request through the encode front."""
        group = self.groups[st.group_id]
        missed, waiting = self.split_encode_work(st)
        st.waiting_hashes = waiting
        if missed:
            st.phase = "waiting_encode"
            st.pending_missed = missed
            group.encode_queue.append(st.req.id)
        elif waiting:
            st.phase = "waiting_shared"
            st.encode_start = self.now
        else:
            self.route_text_or_cached(st)

    def resolve_encode_completion(self, st: RequestState,
                                  finished_hashes: list[str]) -> None:
        group = self.groups[st.group_id]
        ready_waiters: list[RequestState] = []
        for h in finished_hashes:
            for wid in group.pending_encodes.pop(h, []):
                waiter = self.requests[wid]
                waiter.waiting_hashes.discard(h)
                if not waiter.waiting_hashes and waiter.phase == "waiting_shared":
                    ready_waiters.append(waiter)
        if st.waiting_hashes:
            st.phase = "waiting_shared"
        else:
            st.phase = "ready"
            group.ready_queue.append(st.req.id)
        for waiter in ready_waiters:
            waiter.encode_done = self.now
            waiter.encoded_total = waiter.req.image_token_count
            waiter.phase = "ready"
            group.ready_queue.append(waiter.req.id)

    def consult_prefix_cache(self, st: RequestState) -> None:
        cache = self.cache_for(st.group_id)
        if cache is None:
            st.cached_prefix = 0
            return
        symbols, weights = self.unified_sequence(st.req)
        matched, handle = cache.match_prefix(symbols, weights, self.now)
        st.cached_prefix = min(matched, st.req.total_input_len - 1)
        st.prefix_handle = handle

    def release_prefix_pin(self, st: RequestState) -> None:
        cache = self.cache_for(st.group_id)
        if cache is not None and st.prefix_handle is not None:
            cache.release(st.prefix_handle)
            st.prefix_handle = None

    # --- pipeline executors ---

    def route_text_or_cached(self, st: RequestState) -> None:
        """Mark a request ready for prefill with zero encode time."""
        st.encode_start = self.now
        st.encode_done = self.now
        st.encoded_total = st.req.image_token_count
        st.phase = "ready"
        self.groups[st.group_id].ready_queue.append(st.req.id)

    def start_encode(self, st: RequestState, instance_ids: list[int],
                     missed_images: list) -> None:
        st.phase = "encoding"
        st.encode_start = self.now
        group = self.groups[st.group_id]
        group.active_encodes += 1
        seconds = self.profile.encode_time(missed_images, len(instance_ids))
        st.encode_computed_tokens = sum(img.token_count for img in missed_images)
        for iid in instance_ids:
            inst = self.instances[iid]
            inst.stage_role = StageRole.ENCODE
            inst.busy_until = self.now + seconds
        self.counters["encode_jobs"] += 1
        self._push(self.now + seconds, EventKind.ENCODE_DONE,
                   {"request": st.req.id, "instances": list(instance_ids),
                    "missed": [img.content_hash for img in missed_images]})

    def _handle_encode_done(self, ev: SimEvent) -> None:
        st = self.requests[ev.payload["request"]]
        group = self.groups[st.group_id]
        group.active_encodes -= 1
        st.encode_done = self.now
        st.encoded_total = st.req.image_token_count
        cache = self.cache_for(st.group_id)
        if cache is not None:
            by_hash = {img.content_hash: img for img in st.req.images}
            for h in ev.payload["missed"]:
                img = by_hash[h]
                cache.image_insert(h, img.token_count, self.now,
                                   img.token_count * self.profile.kv_bytes_per_token)
        for iid in ev.payload["instances"]:
            inst = self.instances[iid]
            inst.stage_role = StageRole.DECODE if self.ledger[iid] else StageRole.IDLE
            inst.busy_until = self.now
        self.resolve_encode_completion(st, ev.payload["missed"])
        self.driver.on_encode_done(st, ev.payload["instances"])

    def start_prefill(self, group: GroupState, specs: list[part.PrefillRequestSpec],
                      instance_ids: list[int], placements: dict[int, int],
                      migration_wait: float, compute_width: int | None = None) -> PrefillBatch:
        total_tokens = sum(s.prefill_tokens for s in specs)
        width = compute_width if compute_width is not None else len(instance_ids)
        duration = self.profile.prefill_time(total_tokens, width)
        batch = PrefillBatch(
            batch_id=self._next_batch_id, group_id=group.id,
            request_ids=[s.request_id for s in specs],
            instance_ids=sorted(instance_ids), total_tokens=total_tokens,
            dispatch_time=self.now, exec_start=self.now + migration_wait,
            duration=duration)
        self._next_batch_id += 1
        self.batches[batch.batch_id] = batch
        for spec in specs:
            st = self.requests[spec.request_id]
            st.phase = "prefilling"
            st.prefill_dispatch = self.now
            st.prefill_exec_start = batch.exec_start
            st.prefill_computed_tokens = spec.prefill_tokens
            st.home_instance = placements[spec.request_id]
            self.reserve(st.home_instance, spec.request_id, spec.kv_need)
        for iid in instance_ids:
            inst = self.instances[iid]
            inst.stage_role = StageRole.PREFILL
            inst.busy_until = batch.end_time
            self.compute_busy.add(iid)
        self.counters["prefill_batches"] += 1
        self._push(batch.end_time, EventKind.PREFILL_DONE,
                   {"batch": batch.batch_id, "gen": batch.gen})
        return batch

    def _handle_prefill_done(self, ev: SimEvent) -> None:
        batch = self.batches.get(ev.payload["batch"])
        if batch is None or batch.finished or ev.payload["gen"] != batch.gen:
            return
        batch.finished = True
        group = self.groups[batch.group_id]
        self.compute_busy.difference_update(batch.instance_ids)
        for rid in batch.request_ids:
            st = self.requests[rid]
            st.prefill_done = self.now
            st.req.first_token_time = self.now
            st.prefilled_total = st.req.total_input_len
            st.phase = "decoding"
            self.ledger_add(st.home_instance, rid, st.req.total_input_len)
            home = self.instances[st.home_instance]
            if (st.home_instance not in batch.instance_ids
                    and home.stage_role is not StageRole.DECODE):
                home.stage_role = StageRole.DECODE
                self.decode_added_at[st.home_instance] = self.now
            cache = self.cache_for(st.group_id)
            if cache is not None:
                symbols, weights = self.unified_sequence(st.req)
                cache.insert_prefix(symbols, weights, self.now)
            self.release_prefix_pin(st)
            group.decoding[rid] = None
        for iid in batch.instance_ids:
            inst = self.instances[iid]
            if self.ledger[iid]:
                inst.stage_role = StageRole.DECODE
                self.decode_added_at[iid] = self.now
            else:
                inst.stage_role = StageRole.IDLE
            inst.busy_until = self.now
        del self.batches[batch.batch_id]
        self.driver.on_prefill_done(batch)

    def schedule_decode_tick(self, st: RequestState) -> None:
        step = self.driver.decode_step_for(st)
        st.decode_gen += 1
        self._push(self.now + step, EventKind.DECODE_STEP,
                   {"request": st.req.id, "gen": st.decode_gen, "step": step})

    def _handle_decode_step(self, ev: SimEvent) -> None:
        if ev.payload.get("coupled"):
            self.driver.handle_instance_step(ev)
            return
        st = self.requests.get(ev.payload["request"])
        if st is None or st.done or st.paused or ev.payload["gen"] != st.decode_gen:
            return
        group = self.groups[st.group_id]
        st.decoded += 1
        st.decoded_total += 1
        self.ledger_grow(st.home_instance, st.req.id)
        step = ev.payload["step"]
        group.ewma_step = (step if group.ewma_step is None
                           else EWMA_ALPHA * step + (1 - EWMA_ALPHA) * group.ewma_step)
        if st.decoded >= st.req.output_len:
            self._complete_request(st)
        else:
            self.schedule_decode_tick(st)

    def _complete_request(self, st: RequestState) -> None:
        st.completion = self.now
        st.req.completion_time = self.now
        st.phase = "done"
        group = self.groups[st.group_id]
        group.decoding.pop(st.req.id, None)
        group.paused.discard(st.req.id)
        group.live_requests -= 1
        home = st.home_instance
        self.ledger_remove(home, st.req.id)
        self.release_reservation(home, st.req.id)
        inst = self.instances[home]
        if not self.ledger[home] and inst.stage_role is StageRole.DECODE:
            inst.stage_role = StageRole.IDLE
            self.decode_added_at.pop(home, None)
        self.records.append(self._record_for(st))
        self.driver.on_complete(st)

    def _record_for(self, st: RequestState) -> RequestRecord:
        req = st.req
        queue_wait = (st.encode_start - req.arrival_time) + \
                     (st.prefill_dispatch - st.encode_done)
        return RequestRecord(
            id=req.id, modality=req.modality.value, priority_hint=req.priority_hint,
            arrival=req.arrival_time, first_token=st.prefill_done,
            completion=st.completion, input_len=req.total_input_len,
            output_len=req.output_len, queue_wait=queue_wait,
            encode_time=st.encode_done - st.encode_start,
            prefill_time=st.prefill_done - st.prefill_exec_start,
            migration_wait=st.prefill_exec_start - st.prefill_dispatch,
            encoded_tokens=st.encoded_total, prefilled_tokens=st.prefilled_total,
            decoded_tokens=st.decoded_total,
            encode_computed_tokens=st.encode_computed_tokens,
            prefill_computed_tokens=st.prefill_computed_tokens,
            cached_prefix_tokens=st.cached_prefix)

    # --- migration ---

    def plan_migration(self, src: int, dst_candidates: list[int]) -> dict[int, int] | None:
        """Fit src's resident reservations into destination headroom.

        Largest reservations first onto the roomiest destination. Returns
        request -> destination, or None when something does not fit.
        """
        moves: dict[int, int] = {}
        head = {d: self.headroom(d) for d in dst_candidates
                if d not in self.migrating and self.inbound[d] == 0}
        pending = sorted(self.reservation_of[src].items(),
                         key=lambda kv: (-kv[1], kv[0]))
        for rid, slots in pending:
            options = [(room, -d) for d, room in head.items() if room >= slots]
            if not options:
                return None
            _, neg = max(options)
            moves[rid] = -neg
            head[-neg] -= slots
        return moves

    def execute_migration(self, src: int, moves: dict[int, int], after: tuple,
                          reason: str) -> Migration:
        """Move every resident of src to its planned destination.

        Reservations transfer immediately; resident KV (the ledger) lands
        when the migration completes, and the moved requests pause until
        then. Zero resident KV completes instantly.
        """
        for rid, dst in moves.items():
            if self.headroom(dst) < self.reservation_of[src].get(rid, 0):
                raise InsufficientDestinationCapacity(
                    f"instance {dst} cannot take request {rid}")
        duration = self.profile.migration_cost(self.instances[src].kv_used)
        mig = Migration(migration_id=self._next_migration_id, src_instance=src,
                        moves=dict(moves), after=after, start=self.now,
                        duration=duration, reason=reason)
        self._next_migration_id += 1
        for rid, dst in moves.items():
            st = self.requests[rid]
            self.move_reservation(src, dst, rid)
            if rid in self.ledger[src]:
                st.paused = True
                st.decode_gen += 1
                self.groups[st.group_id].paused.add(rid)
            st.home_instance = dst
        self.counters["migrations"] += 1
        if duration <= 0.0:
            self._finish_migration(mig)
        else:
            self.migrations[mig.migration_id] = mig
            self.migrating.add(src)
            for dst in set(moves.values()):
                self.inbound[dst] += 1
            self._push(self.now + duration, EventKind.MIGRATION_DONE,
                       {"migration": mig.migration_id})
        return mig

    def _handle_migration_done(self, ev: SimEvent) -> None:
        mig = self.migrations.pop(ev.payload["migration"])
        self.migrating.discard(mig.src_instance)
        for dst in set(mig.moves.values()):
            self.inbound[dst] -= 1
        self._finish_migration(mig)

    def _finish_migration(self, mig: Migration) -> None:
        src = mig.src_instance
        for rid in sorted(mig.moves):
            dst = mig.moves[rid]
            if rid in self.ledger[src]:
                self.ledger_move(src, dst, rid)
                st = self.requests[rid]
                st.paused = False
                self.groups[st.group_id].paused.discard(rid)
                if self.instances[dst].stage_role is not StageRole.DECODE:
                    self.instances[dst].stage_role = StageRole.DECODE
                    self.decode_added_at[dst] = self.now
                if not st.done:
                    self.schedule_decode_tick(st)
        inst = self.instances[src]
        if mig.after[0] == "idle":
            inst.stage_role = StageRole.IDLE
            self.decode_added_at.pop(src, None)
        elif mig.after[0] == "transfer":
            target_group = mig.after[1]
            self.groups[inst.group].members.discard(src)
            inst.group = target_group
            self.groups[target_group].members.add(src)
            inst.stage_role = StageRole.DECODE
            self.decode_added_at[src] = self.now
            self.counters["inter_group_transfers"] += 1
        # after "prefill": the waiting batch already owns the instance

    # --- arrival / invariants / bookkeeping ---

    def _handle_arrival(self, ev: SimEvent) -> None:
        self.driver.on_arrival(self.requests[ev.payload["request"]])

    def _check_conservation(self) -> None:
        expected = 0
        for st in self.requests.values():
            if st.done:
                continue
            if st.prefill_done is not None:
                expected += st.req.total_input_len + st.decoded
        actual = sum(inst.kv_used for inst in self.instances.values())
        if actual != expected:
            raise MmsimError(f"KV conservation violated at t={self.now}: "
                             f"ledger={actual} expected={expected}")
        for iid, inst in self.instances.items():
            per_ledger = sum(self.ledger[iid].values())
            if per_ledger != inst.kv_used:
                raise MmsimError(
                    f"instance {iid} kv_used {inst.kv_used} != ledger {per_ledger}")
            if inst.kv_used > inst.kv_capacity:
                raise MmsimError(f"instance {iid} over KV capacity")
            if inst.stage_role is StageRole.IDLE and self.ledger[iid]:
                raise MmsimError(f"idle instance {iid} has residents")
        for gid, group in self.groups.items():
            if group.live_requests > 0 and not group.members:
                raise MmsimError(f"group {gid} starved of instances with "
                                 f"{group.live_requests} live requests")

    def _merged_cache_stats(self) -> dict:
        merged: dict = {}
        for cache in self.caches.values():
            for key, val in cache.snapshot_stats().items():
                merged[key] = merged.get(key, 0) + val
        return merged

    def audit_event(self, **fields) -> None:
        kind = fields.get("kind")
        if kind == "scale_up":
            self.counters["scale_ups"] += 1
        elif kind == "scale_down":
            self.counters["scale_downs"] += 1
        elif kind == "preempt_for_prefill":
            if fields.get("forced"):
                self.counters["preemptions_forced"] += 1
            else:
                self.counters["preemptions_opportunistic"] += 1
        if self.cfg.collect_audit:
            fields["time"] = self.now
            self.audit.append(fields)


class _Driver:
    """Policy driver interface; one per run."""

    def __init__(self, eng: Engine):
        self.eng = eng

    def setup(self) -> None:
        raise NotImplementedError

    def on_arrival(self, st: RequestState) -> None:
        raise NotImplementedError

    def pass_once(self) -> bool:
        raise NotImplementedError

    def decode_step_for(self, st: RequestState) -> float:
        return self.eng.decode_step_seconds(self.eng.groups[st.group_id])

    def handle_instance_step(self, ev: SimEvent) -> None:
        raise MmsimError("instance-level decode steps are coupled-only")

    def on_encode_done(self, st: RequestState, instance_ids: list[int]) -> None:
        pass

    def on_prefill_done(self, batch: PrefillBatch) -> None:
        # continuous batching: fresh decoders start ticking immediately
        for rid in batch.request_ids:
            self.eng.schedule_decode_tick(self.eng.requests[rid])

    def on_complete(self, st: RequestState) -> None:
        pass


class _ElasticDriver(_Driver):
    """Two-level elastic scheduling: balancer across groups, partition inside."""

    TEXT_GROUP = 0
    MM_GROUP = 1

    def setup(self) -> None:
        eng = self.eng
        eng.groups[self.TEXT_GROUP] = GroupState(
            id=self.TEXT_GROUP, modality=Modality.TEXT_ONLY,
            estimator=bal.LoadEstimator(eng.profile, eng.cfg.balancer_window))
        eng.groups[self.MM_GROUP] = GroupState(
            id=self.MM_GROUP, modality=Modality.MULTIMODAL,
            estimator=bal.LoadEstimator(eng.profile, eng.cfg.balancer_window))
        plan = bal.proactive_allocate({self.TEXT_GROUP: 1, self.MM_GROUP: 1},
                                      eng.cfg.n_instances)
        next_id = 0
        for gid in sorted(plan.counts):
            for _ in range(plan.counts[gid]):
                eng.add_instance(next_id, gid)
                next_id += 1
        for gid in (self.TEXT_GROUP, self.MM_GROUP):
            eng.caches[gid] = UnifiedCache(eng.cfg.cache_budget_tokens,
                                           eng.cfg.cache_image_fraction)

    def group_of(self, req: Request) -> int:
        if req.is_multimodal or req.priority_hint:
            return self.MM_GROUP
        return self.TEXT_GROUP

    def on_arrival(self, st: RequestState) -> None:
        eng = self.eng
        st.group_id = self.group_of(st.req)
        group = eng.groups[st.group_id]
        group.live_requests += 1
        group.estimator.observe(eng.now, st.req.total_input_len,
                                st.req.image_token_count, st.req.output_len)
        if st.req.is_multimodal:
            eng.admit_multimodal(st)
        else:
            eng.route_text_or_cached(st)

    def pass_once(self) -> bool:
        eng = self.eng
        progress = False
        if eng.cfg.rebalance_enabled:
            progress |= self._rebalance_idle()
        for gid in sorted(eng.groups):
            progress |= self._group_pass(eng.groups[gid])
        return progress

    # -- balancer integration --

    def _rebalance_idle(self) -> bool:
        eng = self.eng
        avg_required: dict[int, int] = {}
        for gid, g in sorted(eng.groups.items()):
            g.avg_required = g.estimator.avg_required(eng.now)
            g.peak_required = g.estimator.peak_required(eng.now)
            avg_required[gid] = g.avg_required
        idles: list[int] = []
        busy_counts: dict[int, int] = {}
        for gid, g in sorted(eng.groups.items()):
            group_idles = eng.idle_instances(g)
            idles.extend(group_idles)
            busy_counts[gid] = len(g.members) - len(group_idles)
        if not idles:
            return False
        grants = bal.assign_idle_instances(avg_required, busy_counts, idles)
        moved = False
        surplus: list[int] = []
        deficit: list[tuple[int, int]] = []
        for gid, g in sorted(eng.groups.items()):
            own = eng.idle_instances(g)
            keep = min(len(own), grants[gid])
            surplus.extend(own[keep:])
            if grants[gid] > keep:
                deficit.append((gid, grants[gid] - keep))
        for gid, need in deficit:
            for _ in range(need):
                if not surplus:
                    break
                iid = surplus.pop(0)
                if eng.reserved[iid] > 0:
                    continue
                src_group = eng.groups[eng.instances[iid].group]
                if (src_group.live_requests > 0
                        and len(src_group.members) <= eng.cfg.min_instances_per_group):
                    continue
                src_group.members.discard(iid)
                eng.instances[iid].group = gid
                eng.groups[gid].members.add(iid)
                moved = True
        return moved

    # -- per-group scheduling --

    def _group_pass(self, group: GroupState) -> bool:
        progress = self._schedule_encodes(group)
        progress |= self._schedule_prefill(group)
        progress |= self._autoscale(group)
        return progress

    def _schedule_encodes(self, group: GroupState) -> bool:
        eng = self.eng
        progress = False
        while group.encode_queue:
            idles = eng.idle_instances(group)
            if not idles:
                break
            # compute-hungry encoding scales across idle instances, but a
            # backlog shares them fairly between queued jobs
            share = max(1, len(idles) // len(group.encode_queue))
            take = min(eng.cfg.encode_max_parallel, share)
            rid = group.encode_queue.pop(0)
            st = eng.requests[rid]
            eng.start_encode(st, idles[:take], st.pending_missed)
            progress = True
        return progress

    def _schedule_prefill(self, group: GroupState) -> bool:
        eng = self.eng
        if not group.ready_queue:
            return False
        if eng.cfg.blocking_encode and group.active_encodes > 0:
            return False
        idles = eng.idle_instances(group)
        cap = eng.cfg.max_prefill_instances
        if cap is not None:
            idles = idles[:cap]
        pool = eng.decode_pool(group)
        homes = [d for d in pool if d not in eng.migrating and eng.inbound[d] == 0]
        banned: set[int] = set()
        admitted_states: dict[int, RequestState] = {}
        while True:
            victims = ([] if not eng.cfg.migration_enabled
                       else self._decode_victims(group, banned))
            free_kv = sum(eng.headroom(i) for i in idles)
            free_kv += sum(eng.headroom(i) for i in homes)
            free_kv += sum(eng.reserved[v.instance_id] for v in victims
                           if v.migratable)
            ready = [eng.requests[rid] for rid in group.ready_queue]
            ref_len = sum(s.req.total_input_len for s in ready) / len(ready)
            budget = eng.profile.tipping_point(max(1, len(idles)), free_kv,
                                               eng.slo_input, ref_len)
            budget = min(budget, eng.cfg.max_batch_tokens_per_instance
                         * max(1, len(idles)))
            items = [part.DispatchItem(s.req.id, s.req.total_input_len,
                                       s.req.priority_hint) for s in ready]
            admitted = part.dispatch(items, free_kv, budget)
            if not admitted:
                break
            specs = []
            for rid in admitted:
                st = eng.requests[rid]
                if rid not in admitted_states:
                    eng.consult_prefix_cache(st)
                    admitted_states[rid] = st
                effective = max(1, st.req.total_input_len - st.cached_prefix)
                specs.append(part.PrefillRequestSpec(
                    request_id=rid, kv_need=st.kv_need,
                    input_len=st.req.total_input_len, prefill_tokens=effective))
            alloc = part.allocate_prefill(
                eng.profile, specs,
                [part.InstanceSlot(i, eng.headroom(i)) for i in idles],
                victims, self._decode_batch_view(group), eng.profile.penalty_w,
                max_instances=eng.cfg.max_prefill_instances,
                extra_homes=[part.InstanceSlot(i, eng.headroom(i)) for i in homes])
            if not alloc.placements:
                break
            # migrations planned against the pool minus everything preempted
            plans: dict[int, dict[int, int]] = {}
            feasible = True
            destinations = [d for d in pool if d not in alloc.preempted]
            for iid in alloc.preempted:
                moves = eng.plan_migration(iid, destinations)
                if moves is None:
                    banned.add(iid)
                    feasible = False
                    break
                plans[iid] = moves
            if not feasible:
                continue
            # final placement against headroom projected past the migrations
            projected = {i: eng.headroom(i) for i in idles}
            for i in homes:
                projected[i] = eng.headroom(i)
            for iid in alloc.preempted:
                for rid, dst in plans[iid].items():
                    projected[dst] = projected.get(dst, eng.headroom(dst)) \
                        - eng.reservation_of[iid][rid]
                projected[iid] = eng.instances[iid].kv_capacity
            final_specs = [s for s in specs if s.request_id in alloc.placements]
            placements = part.place_reservations(final_specs, projected)
            while placements is None and final_specs:
                final_specs.pop()
                placements = part.place_reservations(final_specs, projected)
            if not final_specs:
                break
            for dec in alloc.decisions:
                eng.audit_event(group=group.id, **dec)
            migration_wait = 0.0
            for iid in alloc.preempted:
                inst = eng.instances[iid]
                inst.stage_role = StageRole.PREFILL
                eng.decode_added_at.pop(iid, None)
                mig = eng.execute_migration(iid, plans[iid], ("prefill",),
                                            "prefill_preemption")
                migration_wait = max(migration_wait, mig.duration)
            kept = set(placements)
            eng.counters["dropped_dispatches"] += len(specs) - len(final_specs)
            for rid, st in admitted_states.items():
                if rid not in kept:
                    eng.release_prefix_pin(st)
            for s in final_specs:
                group.ready_queue.remove(s.request_id)
            eng.start_prefill(group, final_specs, alloc.instance_ids,
                              placements, migration_wait,
                              compute_width=self._compute_width(len(alloc.instance_ids)))
            return True
        for st in admitted_states.values():
            eng.release_prefix_pin(st)
        return False

    def _compute_width(self, granted: int) -> int:
        plan = part.choose_parallelism(granted, self.eng.cfg.model_footprint_gb,
                                       self.eng.cfg.instance_memory_gb)
        return max(1, plan.dp_replicas)

    def _decode_victims(self, group: GroupState,
                        banned: set[int]) -> list[part.DecodeVictim]:
        eng = self.eng
        pool = eng.decode_pool(group)
        if len(pool) <= 1:
            return []
        victims = []
        for iid in pool:
            if (iid in eng.migrating or eng.inbound[iid] > 0 or iid in banned
                    or iid in eng.compute_busy):
                continue
            others = [d for d in pool if d != iid]
            plan = eng.plan_migration(iid, others)
            inst = eng.instances[iid]
            victims.append(part.DecodeVictim(
                instance_id=iid, kv_unused=inst.kv_capacity - inst.kv_used,
                kv_used=inst.kv_used, capacity=inst.kv_capacity,
                migratable=plan is not None))
        return victims

    def _decode_batch_view(self, group: GroupState) -> part.DecodeBatchView:
        eng = self.eng
        out_lens = []
        remaining = 0
        for rid in group.decoding:
            st = eng.requests[rid]
            out_lens.append(st.req.output_len)
            remaining += st.req.output_len - st.decoded
        return part.DecodeBatchView(
            output_lens=tuple(out_lens), remaining_output=remaining,
            resident_kv=eng.group_decode_resident_kv(group),
            n_instances=max(1, len(eng.decode_pool(group))))

    def _autoscale(self, group: GroupState) -> bool:
        eng = self.eng
        if not eng.cfg.autoscale_enabled:
            return False
        pool = eng.decode_pool(group)
        active = group.active_decode_count()
        if not pool or active == 0:
            return False
        share = math.ceil(active / len(pool))
        threshold = eng.profile.decode_batch_threshold
        if share > threshold and group.last_shrink_time != eng.now:
            return self._scale_up(group, pool)
        if (share * 2 < threshold and len(pool) > 1
                and eng.now - group.last_shrink_time >= eng.cfg.shrink_cooldown
                and self._instances_wanted()):
            return self._shrink(group, pool)
        return False

    def _instances_wanted(self) -> bool:
        return any(g.ready_queue or g.encode_queue
                   for g in self.eng.groups.values())

    def _scale_up(self, group: GroupState, pool: list[int]) -> bool:
        eng = self.eng
        idles = eng.idle_instances(group)
        # allocation is prefill-guided: decode may not take the last idle
        # while prefill or encode work is still queued
        if group.ready_queue or group.encode_queue:
            idles = idles[:-1]
        batch_view = self._decode_batch_view(group)
        avg = group.ewma_step if group.ewma_step is not None else \
            eng.profile.decode_step_time(max(1, group.active_decode_count()),
                                         len(pool), eng.group_decode_resident_kv(group))
        intra_batch, intra_inst = self._intra_prefill_victim(group)
        inter = self._inter_candidates(group) if eng.cfg.migration_enabled else []
        decision = part.autoscale_decode(
            eng.profile, batch_view, avg, idles,
            intra_batch, intra_inst, 0, inter, eng.profile.penalty_w)
        if decision.action == "none":
            return False
        done = False
        if decision.action == "idle":
            inst = eng.instances[decision.instance_id]
            inst.stage_role = StageRole.DECODE
            eng.decode_added_at[decision.instance_id] = eng.now
            done = True
        elif decision.action == "intra":
            done = self._pull_from_prefill(decision.instance_id, to_group=group.id)
        elif decision.action == "inter":
            done = self._reactive_take(decision.instance_id, group)
        if done:
            eng.audit_event(kind="scale_up", group=group.id, action=decision.action,
                            instance=decision.instance_id, gain=decision.gain,
                            cost=decision.cost, reason=decision.reason)
        return done

    def _intra_prefill_victim(self, group: GroupState):
        eng = self.eng
        for batch in sorted(eng.batches.values(), key=lambda b: b.batch_id):
            if batch.group_id != group.id or batch.finished:
                continue
            if len(batch.instance_ids) < 2 or batch.exec_start > eng.now:
                continue
            candidates = [i for i in batch.instance_ids
                          if i not in eng.migrating and eng.inbound[i] == 0]
            if not candidates:
                continue
            inst = max(candidates,
                       key=lambda i: (eng.instances[i].kv_capacity -
                                      eng.instances[i].kv_used, -i))
            view = part.PrefillBatchView(
                input_lens=tuple(eng.requests[r].req.total_input_len
                                 for r in batch.request_ids),
                batch_tokens=batch.total_tokens,
                n_instances=len(batch.instance_ids))
            return view, inst
        return None, None

    def _inter_candidates(self, needy: GroupState) -> list[bal.PreemptionCandidate]:
        eng = self.eng
        out: list[bal.PreemptionCandidate] = []
        for gid, other in sorted(eng.groups.items()):
            if gid == needy.id:
                continue
            if other.live_requests > 0 and \
                    len(other.members) <= eng.cfg.min_instances_per_group:
                continue
            for iid in sorted(other.members):
                inst = eng.instances[iid]
                if iid in eng.migrating or eng.inbound[iid] > 0:
                    continue
                if inst.stage_role is StageRole.IDLE:
                    if eng.reserved[iid] > 0:
                        continue
                    if other.ready_queue or other.encode_queue:
                        continue
                    out.append(bal.PreemptionCandidate(iid, gid, 0.0, 0.0,
                                                       "idle foreign"))
                elif inst.stage_role is StageRole.DECODE:
                    if iid in eng.compute_busy:
                        continue
                    other_pool = [d for d in eng.decode_pool(other) if d != iid]
                    if not other_pool:
                        continue
                    # minimal impact: never push the donor's own decode
                    # share past the bottleneck threshold (it would just
                    # steal the instance straight back)
                    donor_share = math.ceil(max(1, other.active_decode_count())
                                            / len(other_pool))
                    if donor_share > eng.profile.decode_batch_threshold:
                        continue
                    if eng.plan_migration(iid, other_pool) is None:
                        continue
                    view = self._decode_batch_view(other)
                    cost = part.cost_prefill_preempt(eng.profile, view, inst.kv_used,
                                                     eng.profile.penalty_w)
                    out.append(bal.PreemptionCandidate(
                        iid, gid, cost, eng.profile.migration_cost(inst.kv_used),
                        "foreign decode"))
                elif inst.stage_role is StageRole.PREFILL:
                    batch = self._batch_of_instance(iid)
                    if (batch is None or len(batch.instance_ids) < 2
                            or batch.exec_start > eng.now):
                        continue
                    view = part.PrefillBatchView(
                        input_lens=tuple(eng.requests[r].req.total_input_len
                                         for r in batch.request_ids),
                        batch_tokens=batch.total_tokens,
                        n_instances=len(batch.instance_ids))
                    cost = part.cost_decode_scale_prefill_victim(
                        eng.profile, view, inst.kv_used, eng.profile.penalty_w)
                    out.append(bal.PreemptionCandidate(iid, gid, cost, 0.0,
                                                       "foreign prefill"))
        return out

    def _batch_of_instance(self, iid: int) -> PrefillBatch | None:
        for batch in sorted(self.eng.batches.values(), key=lambda b: b.batch_id):
            if not batch.finished and iid in batch.instance_ids:
                return batch
        return None

    def _pull_from_prefill(self, iid: int, to_group: int) -> bool:
        """Remove iid from its running prefill batch and hand it to decode."""
        eng = self.eng
        batch = self._batch_of_instance(iid)
        if batch is None or len(batch.instance_ids) < 2:
            return False
        remaining_frac = 0.0
        if batch.duration > 0:
            remaining_frac = max(0.0, 1.0 - (eng.now - batch.exec_start) / batch.duration)
        moved: list[tuple[int, int]] = []
        ok = True
        for rid in sorted(eng.reservation_of[iid]):
            if rid not in batch.request_ids:
                continue
            slots = eng.reservation_of[iid][rid]
            dst_opts = [(eng.headroom(d), -d) for d in batch.instance_ids
                        if d != iid and eng.headroom(d) >= slots]
            if not dst_opts:
                ok = False
                break
            _, neg = max(dst_opts)
            eng.move_reservation(iid, -neg, rid)
            eng.requests[rid].home_instance = -neg
            moved.append((rid, -neg))
        if not ok:
            for rid, dst in moved:
                eng.move_reservation(dst, iid, rid)
                eng.requests[rid].home_instance = iid
            return False
        batch.instance_ids.remove(iid)
        eng.compute_busy.discard(iid)
        new_width = self._compute_width(len(batch.instance_ids))
        batch.duration = remaining_frac * eng.profile.prefill_time(
            batch.total_tokens, new_width)
        batch.exec_start = eng.now
        batch.gen += 1
        eng._push(batch.end_time, EventKind.PREFILL_DONE,
                  {"batch": batch.batch_id, "gen": batch.gen})
        for b_iid in batch.instance_ids:
            eng.instances[b_iid].busy_until = batch.end_time
        src_group = eng.groups[eng.instances[iid].group]
        if src_group.id != to_group:
            src_group.members.discard(iid)
            eng.instances[iid].group = to_group
            eng.groups[to_group].members.add(iid)
            eng.counters["inter_group_transfers"] += 1
        eng.instances[iid].stage_role = StageRole.DECODE
        eng.decode_added_at[iid] = eng.now
        return True

    def _reactive_take(self, iid: int, needy: GroupState) -> bool:
        eng = self.eng
        inst = eng.instances[iid]
        if inst.stage_role is StageRole.IDLE:
            eng.groups[inst.group].members.discard(iid)
            inst.group = needy.id
            needy.members.add(iid)
            inst.stage_role = StageRole.DECODE
            eng.decode_added_at[iid] = eng.now
            eng.counters["inter_group_transfers"] += 1
            return True
        if inst.stage_role is StageRole.PREFILL:
            return self._pull_from_prefill(iid, to_group=needy.id)
        if inst.stage_role is StageRole.DECODE:
            other = eng.groups[inst.group]
            plan = eng.plan_migration(iid, [d for d in eng.decode_pool(other)
                                            if d != iid])
            if plan is None:
                return False
            eng.decode_added_at.pop(iid, None)
            eng.execute_migration(iid, plan, ("transfer", needy.id), "reactive_scale")
            return True
        return False

    def _shrink(self, group: GroupState, pool: list[int]) -> bool:
        eng = self.eng
        candidates = [i for i in pool
                      if i not in eng.migrating and eng.inbound[i] == 0
                      and i not in eng.compute_busy]
        if len(candidates) < 2:
            return False
        victim = max(candidates, key=lambda i: (eng.decode_added_at.get(i, -1.0), i))
        plan = eng.plan_migration(victim, [d for d in pool if d != victim])
        if plan is None:
            return False
        group.last_shrink_time = eng.now
        eng.audit_event(kind="scale_down", group=group.id, instance=victim,
                        reason="decode share below half threshold")
        eng.decode_added_at.pop(victim, None)
        eng.execute_migration(victim, plan, ("idle",), "decode_shrink")
        return True


class _StaticDriver(_Driver):
    """Fixed modality split; fixed per-stage pools; no preemption or scaling."""

    TEXT_GROUP = 0
    MM_GROUP = 1

    def setup(self) -> None:
        eng = self.eng
        n = eng.cfg.n_instances
        n_mm = round(n * eng.cfg.static_mm_fraction)
        n_mm = min(max(n_mm, 3), n - 2)
        n_text = n - n_mm
        if n_text < 2 or n_mm < 3:
            raise ConfigError(
                "static split needs at least 2 text-only and 3 multimodal "
                f"instances, got text={n_text} mm={n_mm}")
        eng.groups[self.TEXT_GROUP] = GroupState(id=self.TEXT_GROUP,
                                                 modality=Modality.TEXT_ONLY)
        eng.groups[self.MM_GROUP] = GroupState(id=self.MM_GROUP,
                                               modality=Modality.MULTIMODAL)
        text_ids = [eng.add_instance(i, self.TEXT_GROUP).id for i in range(n_text)]
        mm_ids = [eng.add_instance(n_text + i, self.MM_GROUP).id for i in range(n_mm)]
        half = (n_text + 1) // 2
        third = n_mm // 3
        rem = n_mm - 3 * third
        enc = third + (1 if rem >= 1 else 0)
        pre = third + (1 if rem >= 2 else 0)
        self.pools = {
            self.TEXT_GROUP: {"encode": [], "prefill": text_ids[:half],
                              "decode": text_ids[half:]},
            self.MM_GROUP: {"encode": mm_ids[:enc],
                            "prefill": mm_ids[enc:enc + pre],
                            "decode": mm_ids[enc + pre:]},
        }
        for gid, pools in self.pools.items():
            for iid in pools["decode"]:
                eng.instances[iid].stage_role = StageRole.DECODE
                eng.decode_added_at[iid] = 0.0
            for iid in pools["prefill"]:
                eng.instances[iid].stage_role = StageRole.PREFILL
            for iid in pools["encode"]:
                eng.instances[iid].stage_role = StageRole.ENCODE
            eng.caches[gid] = UnifiedCache(eng.cfg.cache_budget_tokens,
                                           eng.cfg.cache_image_fraction)

    def on_arrival(self, st: RequestState) -> None:
        eng = self.eng
        st.group_id = self.MM_GROUP if st.req.is_multimodal else self.TEXT_GROUP
        group = eng.groups[st.group_id]
        group.live_requests += 1
        if st.req.is_multimodal:
            eng.admit_multimodal(st)
        else:
            eng.route_text_or_cached(st)

    def pass_once(self) -> bool:
        progress = False
        for gid in sorted(self.eng.groups):
            group = self.eng.groups[gid]
            progress |= self._schedule_encodes(group)
            progress |= self._schedule_prefill(group)
        return progress

    def _free(self, ids: list[int]) -> list[int]:
        return [i for i in ids if self.eng.instances[i].busy_until <= self.eng.now]

    def _schedule_encodes(self, group: GroupState) -> bool:
        eng = self.eng
        pool = self.pools[group.id]["encode"]
        progress = False
        while group.encode_queue:
            free = self._free(pool)
            if not free:
                break
            share = max(1, len(free) // len(group.encode_queue))
            take = min(eng.cfg.encode_max_parallel, share)
            rid = group.encode_queue.pop(0)
            st = eng.requests[rid]
            eng.start_encode(st, free[:take], st.pending_missed)
            progress = True
        return progress

    def _schedule_prefill(self, group: GroupState) -> bool:
        eng = self.eng
        if not group.ready_queue:
            return False
        if eng.cfg.blocking_encode and group.active_encodes > 0:
            return False
        free_compute = self._free(self.pools[group.id]["prefill"])
        if not free_compute:
            return False
        homes = self.pools[group.id]["decode"]
        free_kv = sum(eng.headroom(i) for i in homes)
        ready = [eng.requests[rid] for rid in group.ready_queue]
        ref_len = sum(s.req.total_input_len for s in ready) / len(ready)
        budget = eng.profile.tipping_point(len(free_compute), free_kv,
                                           eng.slo_input, ref_len)
        budget = min(budget, eng.cfg.max_batch_tokens_per_instance
                     * len(free_compute))
        items = [part.DispatchItem(s.req.id, s.req.total_input_len, s.req.priority_hint)
                 for s in ready]
        admitted = part.dispatch(items, free_kv, budget)
        if not admitted:
            return False
        specs = []
        for rid in admitted:
            st = eng.requests[rid]
            eng.consult_prefix_cache(st)
            effective = max(1, st.req.total_input_len - st.cached_prefix)
            specs.append(part.PrefillRequestSpec(rid, st.kv_need,
                                                 st.req.total_input_len, effective))
        headroom = {i: eng.headroom(i) for i in homes}
        placements = part.place_reservations(specs, headroom)
        while placements is None and specs:
            dropped = specs.pop()
            eng.release_prefix_pin(eng.requests[dropped.request_id])
            eng.counters["dropped_dispatches"] += 1
            placements = part.place_reservations(specs, headroom)
        if not specs or placements is None:
            return False
        for s in specs:
            group.ready_queue.remove(s.request_id)
        eng.start_prefill(group, specs, free_compute, placements, 0.0)
        return True

    def on_prefill_done(self, batch: PrefillBatch) -> None:
        # compute instances return to the pinned prefill role; residents were
        # homed on decode-pool instances from the start
        for iid in batch.instance_ids:
            self.eng.instances[iid].stage_role = StageRole.PREFILL
        super().on_prefill_done(batch)

    def on_encode_done(self, st: RequestState, instance_ids: list[int]) -> None:
        for iid in instance_ids:
            self.eng.instances[iid].stage_role = StageRole.ENCODE

    def on_complete(self, st: RequestState) -> None:
        inst = self.eng.instances[st.home_instance]
        if inst.stage_role is not StageRole.DECODE:
            inst.stage_role = StageRole.DECODE


class _CoupledDriver(_Driver):
    """Monolithic instances: encode, prefill and decode share each GPU."""

    GROUP = 0

    def setup(self) -> None:
        eng = self.eng
        eng.groups[self.GROUP] = GroupState(id=self.GROUP, modality=Modality.MULTIMODAL)
        for i in range(eng.cfg.n_instances):
            eng.add_instance(i, self.GROUP)
        n = eng.cfg.n_instances
        self.waiting: dict[int, list[int]] = {i: [] for i in range(n)}
        self.decoders: dict[int, dict[int, None]] = {i: {} for i in range(n)}
        self.busy: dict[int, float] = {i: 0.0 for i in range(n)}
        self.encoded: set[int] = set()
        self.step_gen: dict[int, int] = {i: 0 for i in range(n)}
        if eng.cfg.cache_enabled:
            eng.caches[self.GROUP] = UnifiedCache(eng.cfg.cache_budget_tokens,
                                                  eng.cfg.cache_image_fraction)

    def on_arrival(self, st: RequestState) -> None:
        eng = self.eng
        st.group_id = self.GROUP
        eng.groups[self.GROUP].live_requests += 1
        _, target = min((len(self.waiting[i]) + len(self.decoders[i]), i)
                        for i in sorted(self.waiting))
        st.home_instance = target
        self.waiting[target].append(st.req.id)
        if not st.req.is_multimodal:
            self.encoded.add(st.req.id)
            st.encode_start = eng.now
            st.encode_done = eng.now

    def decode_step_for(self, st: RequestState) -> float:
        raise MmsimError("coupled decode advances whole instance batches")

    def on_prefill_done(self, batch: PrefillBatch) -> None:
        eng = self.eng
        iid = batch.instance_ids[0]
        for rid in batch.request_ids:
            self.decoders[iid][rid] = None
        self.busy[iid] = eng.now
        eng.instances[iid].stage_role = StageRole.DECODE

    def pass_once(self) -> bool:
        progress = False
        for iid in sorted(self.waiting):
            progress |= self._instance_pass(iid)
        return progress

    def _instance_pass(self, iid: int) -> bool:
        eng = self.eng
        if self.busy[iid] > eng.now:
            return False
        queue = self.waiting[iid]
        if queue:
            ready_prefix: list[int] = []
            for rid in queue:
                if rid in self.encoded:
                    ready_prefix.append(rid)
                else:
                    break
            if not ready_prefix:
                return self._start_encode_unit(iid, queue[0])
            if self._start_prefill_unit(iid, ready_prefix):
                return True
        if self.decoders[iid]:
            return self._start_decode_unit(iid)
        return False

    def _start_encode_unit(self, iid: int, rid: int) -> bool:
        eng = self.eng
        st = eng.requests[rid]
        missed = eng.consult_image_cache(st)
        if not missed:
            self.encoded.add(rid)
            st.encode_start = eng.now
            st.encode_done = eng.now
            st.encoded_total = st.req.image_token_count
            return True
        seconds = eng.profile.encode_time(missed, 1)
        st.encode_start = eng.now
        st.encode_computed_tokens = sum(img.token_count for img in missed)
        inst = eng.instances[iid]
        inst.stage_role = StageRole.ENCODE
        self.busy[iid] = eng.now + seconds
        inst.busy_until = self.busy[iid]
        eng.groups[self.GROUP].active_encodes += 1
        eng.counters["encode_jobs"] += 1
        eng._push(self.busy[iid], EventKind.ENCODE_DONE,
                  {"request": rid, "instances": [iid],
                   "missed": [img.content_hash for img in missed]})
        return True

    def on_encode_done(self, st: RequestState, instance_ids: list[int]) -> None:
        # the shared handler queued the request as group-ready; coupled keeps
        # its own per-instance FCFS queue instead
        self.encoded.add(st.req.id)
        group = self.eng.groups[self.GROUP]
        if st.req.id in group.ready_queue:
            group.ready_queue.remove(st.req.id)
        self.busy[instance_ids[0]] = self.eng.now

    def _start_prefill_unit(self, iid: int, ready_prefix: list[int]) -> bool:
        eng = self.eng
        budget = eng.profile.tipping_point(
            1, eng.headroom(iid), eng.slo_input,
            max(1.0, sum(eng.requests[r].req.total_input_len for r in ready_prefix)
                / len(ready_prefix)))
        budget = min(budget, eng.cfg.max_batch_tokens_per_instance)
        specs = []
        taken: list[int] = []
        used_kv = 0
        used_tokens = 0
        for rid in ready_prefix:
            st = eng.requests[rid]
            if used_kv + st.kv_need > eng.headroom(iid):
                break
            if used_tokens + st.req.total_input_len > budget:
                break
            eng.consult_prefix_cache(st)
            effective = max(1, st.req.total_input_len - st.cached_prefix)
            specs.append(part.PrefillRequestSpec(rid, st.kv_need,
                                                 st.req.total_input_len, effective))
            used_kv += st.kv_need
            used_tokens += st.req.total_input_len
            taken.append(rid)
        if not specs:
            return False
        for rid in taken:
            self.waiting[iid].remove(rid)
        placements = {s.request_id: iid for s in specs}
        batch = eng.start_prefill(eng.groups[self.GROUP], specs, [iid], placements, 0.0)
        self.busy[iid] = batch.end_time
        return True

    def _start_decode_unit(self, iid: int) -> bool:
        eng = self.eng
        inst = eng.instances[iid]
        step = eng.profile.decode_step_time(len(self.decoders[iid]), 1, inst.kv_used)
        self.step_gen[iid] += 1
        self.busy[iid] = eng.now + step
        inst.busy_until = self.busy[iid]
        inst.stage_role = StageRole.DECODE
        eng._push(self.busy[iid], EventKind.DECODE_STEP,
                  {"instance": iid, "gen": self.step_gen[iid], "step": step,
                   "coupled": True})
        return True

    def handle_instance_step(self, ev: SimEvent) -> None:
        eng = self.eng
        iid = ev.payload["instance"]
        if ev.payload["gen"] != self.step_gen[iid]:
            return
        group = eng.groups[self.GROUP]
        step = ev.payload["step"]
        group.ewma_step = (step if group.ewma_step is None
                           else EWMA_ALPHA * step + (1 - EWMA_ALPHA) * group.ewma_step)
        for rid in list(self.decoders[iid]):
            st = eng.requests[rid]
            st.decoded += 1
            st.decoded_total += 1
            eng.ledger_grow(iid, rid)
            if st.decoded >= st.req.output_len:
                del self.decoders[iid][rid]
                eng._complete_request(st)
        self.busy[iid] = eng.now


def run(trace: list[Request], policy: str, profile: CostProfile,
        config: RunConfig | None = None, slo_input: float = math.inf,
        seed: int = 0) -> RunResult:
    """Simulate the trace to completion under the named policy."""
    return Engine(trace, policy, profile, config, slo_input, seed).run()
