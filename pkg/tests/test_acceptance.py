"""Acceptance suite.

One test per criterion; each prints a single PASS/FAIL line (run pytest
with -s to see them inline). The heavyweight scenario tests pin their
seeds, grids and tolerances here, not in the package.
"""
import dataclasses
import itertools
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

import oracles
from conftest import image, mm_request, text_request
from mmsim import experiments as exp
from mmsim.balancer import burst_tolerance, proactive_allocate
from mmsim.cache import PrefixTree
from mmsim.engine import RunConfig, config_for_policy, run
from mmsim.metrics import (aggregate, calibrate_light_load, make_slo_probe,
                           max_throughput_under_slo, slo_from_calibration)
from mmsim.partition import (DecodeBatchView, PrefillBatchView,
                             cost_decode_scale_prefill_victim,
                             cost_prefill_preempt, gain_decode_scale,
                             gain_prefill)
from mmsim.workload import generate


@contextmanager
def criterion(num: int, label: str):
    started = time.monotonic()
    try:
        yield
    except BaseException:
        print(f"\nACCEPTANCE {num:02d} {label}: FAIL "
              f"({time.monotonic() - started:.1f}s)")
        raise
    print(f"\nACCEPTANCE {num:02d} {label}: PASS "
          f"({time.monotonic() - started:.1f}s)")


@pytest.fixture(scope="module")
def cost():
    return exp.resolve_cost_profile("default")


@pytest.fixture(scope="module")
def sharegpt():
    return exp.resolve_dataset_profile("sharegpt4o-like")


@pytest.fixture(scope="module")
def light_load(sharegpt, cost):
    return calibrate_light_load(sharegpt, cost, seed=7)


def test_criterion_1_formula_oracles(cost):
    with criterion(1, "formula oracles match straight-line references"):
        started = time.monotonic()
        rng = random.Random(20240817)
        for _ in range(1000):
            assigned = rng.randint(0, 24)
            avg = rng.randint(1, 8)
            assert burst_tolerance(assigned, avg) == pytest.approx(
                oracles.ref_burst_tolerance(assigned, avg), rel=1e-9)

            tokens = rng.randint(1, 80_000)
            input_lens = [rng.randint(1, 9000) for _ in range(rng.randint(1, 10))]
            n = rng.randint(1, 8)
            assert gain_prefill(cost, tokens, input_lens, n) == pytest.approx(
                oracles.ref_gain_prefill(cost, tokens, input_lens, n), rel=1e-9)

            out_lens = tuple(rng.randint(1, 400) for _ in range(rng.randint(1, 14)))
            remaining = rng.randint(0, sum(out_lens))
            kv = rng.randint(0, 400_000)
            n_d = rng.randint(2, 6)
            victim_kv = rng.randint(0, 150_000)
            w = rng.uniform(0, 8)
            batch = DecodeBatchView(out_lens, remaining, kv, n_d)
            assert cost_prefill_preempt(cost, batch, victim_kv, w) == pytest.approx(
                oracles.ref_cost_prefill_preempt(cost, out_lens, remaining, kv,
                                                 n_d, victim_kv, w), rel=1e-9)

            avg_lat = rng.uniform(0.005, 0.3)
            assert gain_decode_scale(cost, batch, avg_lat) == pytest.approx(
                oracles.ref_gain_decode_scale(cost, out_lens, kv, n_d, avg_lat),
                rel=1e-9)

            in_lens = tuple(rng.randint(1, 9000) for _ in range(rng.randint(1, 8)))
            n_p = rng.randint(2, 6)
            view = PrefillBatchView(in_lens, sum(in_lens), n_p)
            assert cost_decode_scale_prefill_victim(
                cost, view, victim_kv, w) == pytest.approx(
                oracles.ref_cost_decode_scale(cost, in_lens, sum(in_lens), n_p,
                                              victim_kv, w), rel=1e-9)
        assert time.monotonic() - started < 5.0


def _compositions(n: int, k: int):
    if k == 1:
        yield (n,)
        return
    for head in range(1, n - k + 2):
        for rest in _compositions(n - head, k - 1):
            yield (head,) + rest


def test_criterion_2_maximin_matches_exhaustive():
    with criterion(2, "greedy maximin equals exhaustive optimum (full sweep)"):
        started = time.monotonic()
        comp_cache = {}
        checked = 0
        for k in range(1, 5):
            for avg_vec in itertools.product(range(1, 7), repeat=k):
                avg = dict(enumerate(avg_vec))
                for total in range(k, 13):
                    plan = proactive_allocate(avg, total)
                    key = (total, k)
                    if key not in comp_cache:
                        comp_cache[key] = list(_compositions(total, k))
                    best = max(min(split[g] / avg_vec[g] for g in range(k))
                               for split in comp_cache[key])
                    assert plan.min_tolerance == pytest.approx(best), (avg, total)
                    counts = {g: 0 for g in avg}
                    for chosen, _bt in plan.steps:
                        cur_min = min(counts[g] / avg[g] for g in avg)
                        assert counts[chosen] / avg[chosen] == pytest.approx(cur_min)
                        counts[chosen] += 1
                    checked += 1
        assert checked > 10_000
        assert time.monotonic() - started < 30.0


def test_criterion_3_ttft_ordering(cost, sharegpt):
    with criterion(3, "TTFT ordering elastic < static < coupled, >=2x vs coupled"):
        started = time.monotonic()
        qps_points = [round(0.2 * i, 1) for i in range(1, 11)]  # 0.2 .. 2.0
        means = {}
        for policy in ("elastic", "static", "coupled"):
            for qps in qps_points:
                trace = generate(sharegpt, qps, 120.0, seed=3)
                res = run(trace, policy, cost, config_for_policy(policy), seed=3)
                means[(policy, qps)] = aggregate(res).aggregates["ttft"]["mean"]
        top3 = qps_points[-3:]
        for qps in top3:
            e, s, c = (means[("elastic", qps)], means[("static", qps)],
                       means[("coupled", qps)])
            assert e < s < c, f"ordering violated at qps={qps}: {e} {s} {c}"
            assert c / e >= 2.0, f"elastic only {c / e:.2f}x better at qps={qps}"
        assert time.monotonic() - started < 600.0


def test_criterion_4_slo_throughput_ordering(cost, sharegpt, light_load):
    with criterion(4, "max QPS under SLO ordering at every scale, >=1.5x at 1"):
        started = time.monotonic()
        best = {}
        for policy in ("elastic", "static", "coupled"):
            cfg = config_for_policy(policy)
            for scale in (1.0, 2.0, 3.0, 4.0, 5.0):
                slo = slo_from_calibration(light_load[0], light_load[1], scale)
                probe = make_slo_probe(policy, sharegpt, cost, slo, cfg,
                                       seed=1, horizon=120.0)
                found = max_throughput_under_slo(probe, 0.2, 8.0)
                best[(policy, scale)] = found.max_qps
        for scale in (1.0, 2.0, 3.0, 4.0, 5.0):
            e, s, c = (best[("elastic", scale)], best[("static", scale)],
                       best[("coupled", scale)])
            assert e > s > c, f"ordering violated at scale {scale}: {e} {s} {c}"
        ratio = best[("elastic", 1.0)] / best[("coupled", 1.0)]
        assert ratio >= 1.5, f"elastic only {ratio:.2f}x coupled at scale 1"
        assert time.monotonic() - started < 1800.0


def _mixed_duplicate_heavy_trace(sharegpt, qps, horizon, seed):
    other = exp.resolve_dataset_profile("visualwebinstruct-like")
    heavy_a = dataclasses.replace(sharegpt, duplicate_image_rate=0.6,
                                  duplicate_prefix_rate=0.5)
    heavy_b = dataclasses.replace(other, duplicate_image_rate=0.6,
                                  duplicate_prefix_rate=0.5)
    half = qps / 2.0
    merged = sorted(generate(heavy_a, half, horizon, seed)
                    + generate(heavy_b, half, horizon, seed + 1),
                    key=lambda r: r.arrival_time)
    return [dataclasses.replace(r, id=i) for i, r in enumerate(merged)]


def test_criterion_5_ablation_structure(cost, sharegpt, light_load):
    with criterion(5, "dynamic allocation beats static splits; each "
                      "optimization strictly cuts TTFT"):
        # allocation ablation on a bursty trace (burst of image traffic)
        rows = exp.allocation_ablation(sharegpt, cost, light_load, seed=2,
                                       horizon=80.0, scales=(2.0,),
                                       qps_range=(0.2, 5.0))
        by_variant = {r["variant"]: r["max_qps"] for r in rows}
        dynamic = by_variant.pop("elastic-dynamic")
        best_static = max(by_variant.values())
        assert dynamic > best_static, (dynamic, by_variant)

        # optimization ablation on a duplicate-heavy mixed trace
        for qps in (1.0, 1.6):
            trace = _mixed_duplicate_heavy_trace(sharegpt, qps, 120.0, seed=5)
            ttfts = {}
            for variant, overrides in exp.OPTIMIZATION_VARIANTS.items():
                res = exp.run_policy("elastic",
                                     [dataclasses.replace(r) for r in trace],
                                     cost, None, None, seed=5, **overrides)
                ttfts[variant] = aggregate(res).aggregates["ttft"]["mean"]
            assert ttfts["emp-only"] > ttfts["unicache"] > ttfts["full"], ttfts


def test_criterion_6_equivalence_invariants(cost, sharegpt):
    with criterion(6, "token totals identical across migration/cache/"
                      "parallelism variants; KV conserved per event"):
        started = time.monotonic()
        small = dataclasses.replace(sharegpt, output_len_mu=3.0,
                                    output_len_sigma=0.4)

        def totals(res):
            return {r.id: (r.encoded_tokens, r.prefilled_tokens,
                           r.decoded_tokens) for r in res.records}

        checked = 0
        for i in range(200):
            trace = generate(small, qps=2.5, horizon_seconds=10, seed=3000 + i)
            if not trace:
                continue

            def fresh():
                return [dataclasses.replace(r) for r in trace]

            base = run(fresh(), "elastic", cost,
                       config_for_policy("elastic",
                                         RunConfig(check_invariants=True)))
            expect = totals(base)
            kind = i % 3
            if kind == 0:
                other = run(fresh(), "elastic", cost, config_for_policy(
                    "elastic", RunConfig(check_invariants=True),
                    migration_enabled=False, autoscale_enabled=False))
            elif kind == 1:
                other = run(fresh(), "elastic", cost, config_for_policy(
                    "elastic", RunConfig(check_invariants=True),
                    cache_enabled=False))
            else:
                other = run(fresh(), "elastic", cost, config_for_policy(
                    "elastic", RunConfig(check_invariants=True, n_instances=5,
                                         max_prefill_instances=2)))
            assert totals(other) == expect, f"trace seed {3000 + i}"
            checked += 1
        assert checked >= 190
        assert time.monotonic() - started < 300.0


def test_criterion_7_w_monotonicity(cost, sharegpt):
    with criterion(7, "opportunistic preemptions non-increasing in w"):
        trace = generate(sharegpt, qps=3.0, horizon_seconds=90, seed=11)
        counts = []
        for w in (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0):
            prof = dataclasses.replace(cost, penalty_w=w)
            res = run([dataclasses.replace(r) for r in trace], "elastic", prof,
                      config_for_policy("elastic"), seed=11)
            counts.append(res.counters["preemptions_opportunistic"])
        assert counts[0] > 0, "fixture must exercise opportunistic preemption"
        assert all(a >= b for a, b in zip(counts, counts[1:])), counts


def _tree_snapshot(tree):
    """Plain-dict structural dump used by the brute-force eviction oracle."""
    nodes = {}

    def walk(node, parent_id):
        for child in node.children.values():
            nodes[child.node_id] = {
                "parent": parent_id, "kv": child.kv_tokens,
                "last_used": child.last_used, "user_count": child.user_count,
                "children": [c.node_id for c in child.children.values()],
            }
            walk(child, child.node_id)

    walk(tree.root, 0)
    return nodes


def _oracle_evict(nodes, needed):
    """Brute force: repeatedly drop the LRU idle leaf until enough is free."""
    victims = []
    freed = 0
    alive = dict(nodes)
    while freed < needed:
        leaves = [nid for nid, n in alive.items()
                  if not n["children"] and n["user_count"] == 0]
        if not leaves:
            break
        victim = min(leaves, key=lambda nid: (alive[nid]["last_used"], nid))
        freed += alive[victim]["kv"]
        victims.append(victim)
        parent = alive[victim]["parent"]
        if parent in alive:
            alive[parent]["children"].remove(victim)
        del alive[victim]
    return victims


def test_criterion_8_cache_lru_matches_oracle():
    with criterion(8, "LRU eviction matches brute-force oracle; no pinned "
                      "eviction; capacity bound holds"):
        rng = random.Random(77)
        sequences = 10_000
        for case in range(sequences):
            tree = PrefixTree(rng.randint(6, 24))
            handles = []
            clock = 0.0
            for _ in range(rng.randint(4, 9)):
                clock += 1.0
                op = rng.random()
                if op < 0.55:
                    seq = [rng.choice("abc") for _ in range(rng.randint(1, 6))]
                    tree.insert_prefix(seq, now=clock)
                elif op < 0.8:
                    seq = [rng.choice("abc") for _ in range(rng.randint(1, 6))]
                    _, h = tree.match_prefix(seq, now=clock)
                    handles.append(h)
                    if len(handles) > 2:
                        tree.release(handles.pop(0))
                else:
                    needed = rng.randint(1, 12)
                    pinned_before = {n.node_id for n in tree.iter_nodes()
                                     if n.user_count > 0}
                    snapshot = _tree_snapshot(tree)
                    mark = len(tree.eviction_log)
                    tree.evict(needed, now=clock)
                    got = [nid for nid, _, _ in tree.eviction_log[mark:]]
                    assert got == _oracle_evict(snapshot, needed), f"case {case}"
                    assert not (set(got) & pinned_before)
                assert tree.total_tokens <= tree.capacity
            for h in handles:
                tree.release(h)


def test_criterion_9_cli_determinism(tmp_path, cost):
    with criterion(9, "repeated CLI invocations are byte-identical"):
        from mmsim.cli import main as cli
        trace = tmp_path / "trace.jsonl"
        scenarios = [
            ["simulate", "--trace", str(trace), "--policy", "elastic",
             "--seed", "4"],
            ["simulate", "--trace", str(trace), "--policy", "static",
             "--seed", "4"],
            ["simulate", "--trace", str(trace), "--policy", "coupled",
             "--seed", "4"],
        ]
        t_a = tmp_path / "ta.jsonl"
        t_b = tmp_path / "tb.jsonl"
        for target in (t_a, t_b):
            assert cli(["gen-trace", "--profile", "sharegpt4o-like", "--qps",
                        "1.5", "--horizon", "40", "--seed", "9", "--out",
                        str(target)]) == 0
        assert t_a.read_bytes() == t_b.read_bytes()
        trace.write_bytes(t_a.read_bytes())
        for idx, argv in enumerate(scenarios):
            out_a = tmp_path / f"s{idx}_a.json"
            out_b = tmp_path / f"s{idx}_b.json"
            assert cli(argv + ["--out", str(out_a)]) == 0
            assert cli(argv + ["--out", str(out_b)]) == 0
            assert out_a.read_bytes() == out_b.read_bytes(), argv


def _contract_trace(seed):
    rng = np.random.default_rng(seed)
    reqs = []
    t = 0.0
    for i in range(6):
        t += float(rng.exponential(0.8))
        if rng.random() < 0.5:
            img = image(f"nb-{seed}-{i}", 6516)
            reqs.append(mm_request(i, t, [img],
                                   text_len=int(rng.integers(20, 200)),
                                   output_len=int(rng.integers(5, 40))))
        else:
            reqs.append(text_request(i, t, text_len=int(rng.integers(20, 200)),
                                     output_len=int(rng.integers(5, 40)),
                                     priority=True))
    return reqs


def test_criterion_10_nonblocking_contract(cost):
    with criterion(10, "encoding never delays co-resident text requests; "
                       "blocking ablation shows delays"):
        prof = dataclasses.replace(cost, decode_batch_coeff=0.0,
                                   decode_kv_coeff=0.0,
                                   decode_batch_threshold=1000)
        base = RunConfig(n_instances=16, max_prefill_instances=1,
                         encode_max_parallel=1, rebalance_enabled=False,
                         autoscale_enabled=False, migration_enabled=False)
        cfg = config_for_policy("elastic", base, cache_enabled=False)
        cfg_block = config_for_policy("elastic", base, cache_enabled=False,
                                      blocking_encode=True)

        def text_stamps(res):
            return {r.id: (r.first_token, r.completion) for r in res.records
                    if r.modality == "text"}

        checked = 0
        blocking_delays = 0
        for seed in range(150):
            trace = _contract_trace(seed)
            text_only = [r for r in trace if not r.is_multimodal]
            if not text_only or len(text_only) == len(trace):
                continue
            joint = run([dataclasses.replace(r) for r in trace], "elastic",
                        prof, cfg)
            solo = run([dataclasses.replace(r) for r in text_only], "elastic",
                       prof, cfg)
            assert text_stamps(joint) == text_stamps(solo), f"seed {seed}"
            jointb = run([dataclasses.replace(r) for r in trace], "elastic",
                         prof, cfg_block)
            if text_stamps(jointb) != text_stamps(solo):
                blocking_delays += 1
            checked += 1
            if checked >= 100:
                break
        assert checked == 100
        assert blocking_delays > 0
