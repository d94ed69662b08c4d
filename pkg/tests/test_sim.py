from collections import Counter

import pytest

from conftest import make_profile, queued_trace, req
from vqserve.core import ConfigError, InstanceSpec, Request
from vqserve.experiment import ExperimentConfig, run_point
from vqserve.invariants import check_invariants
from vqserve.scheduler import SchedulePlan
from vqserve.sim import EventLog, SimConfig, Simulator, StalePlanError, run_simulation
from vqserve.workload import Trace


def two_model_spec(**kw):
    x = make_profile("x", **kw)
    y = make_profile("y", **kw)
    return InstanceSpec("i0", "g", {"x": x, "y": y}, "x", warm_slots=1)


def test_empty_trace():
    res = run_simulation(Trace.from_requests([]), [make_profile()], policy="qlm")
    assert len(res.log) == 0
    assert res.violations == []


@pytest.mark.parametrize("policy", ["qlm", "edf", "fcfs"])
def test_single_request_first_token(policy):
    p = make_profile(inefficiency=1.25)
    res = run_simulation(Trace.from_requests([req("a", t=1.0, o=3)]), [p], policy=policy)
    # one iteration: prefill plus one decode step
    assert res.first_token["a"] == pytest.approx(1.0 + 0.5 + 0.1)
    assert res.completion["a"] == pytest.approx(1.6 + 2 * 0.1)
    assert check_invariants(res) == []


def test_same_seed_identical_log(vicuna):
    tr = queued_trace(60, seed=2)
    a = run_simulation(tr, [vicuna, vicuna], policy="qlm", seed=5)
    b = run_simulation(tr, [vicuna, vicuna], policy="qlm", seed=5)
    assert a.log.to_jsonl() == b.log.to_jsonl()
    assert EventLog.from_jsonl(a.log.to_jsonl()).to_jsonl() == a.log.to_jsonl()


def test_completion_frees_slot():
    tr = Trace.from_requests([req("a", o=1), req("b", o=3)])
    res = run_simulation(tr, [make_profile()], policy="fcfs", record_iterations=True)
    it = res.iterations["i0"]
    assert it[0][2:] == (2, 2)
    assert it[1][2:] == (1, 1)
    assert res.completion["a"] == pytest.approx(0.6)


def test_capacity_preempts_newest_only():
    # capacity 30, three requests of 9 input tokens: all three fit at admission
    # (9 + 1 each); the next growth step needs 33 and the newest is preempted
    tr = Trace.from_requests([req("a", i=9, o=5), req("b", i=9, o=5), req("c", i=9, o=5)])
    res = run_simulation(tr, [make_profile(token_capacity=30)], policy="fcfs")
    pre = res.log.of_kind("preemption")
    assert [r["request"] for r in pre] == ["c"]
    assert pre[0]["t"] == pytest.approx(0.6)
    assert res.completion["a"] == res.completion["b"] == pytest.approx(0.6 + 4 * 0.1)
    assert res.preemptions == 1
    assert check_invariants(res) == []


def test_restore_takes_footprint_over_bandwidth():
    tr = Trace.from_requests([req("a", i=9, o=5), req("b", i=9, o=5), req("c", i=9, o=5)])
    res = run_simulation(tr, [make_profile(token_capacity=30, kv_transfer_bandwidth=50.0)], policy="fcfs")
    (rest,) = res.log.of_kind("restore")
    assert rest["ready_at"] - rest["t"] == pytest.approx(10 / 50.0)
    # restored requests skip prefill and keep their first token
    assert res.completion["c"] == pytest.approx(rest["ready_at"] + 4 * 0.1)
    assert res.first_token["c"] == pytest.approx(0.6)


def test_full_batch_blocks_pull():
    rs = [req(f"r{k}", i=9, o=5) for k in range(4)]
    res = run_simulation(Trace.from_requests(rs), [make_profile(token_capacity=30)], policy="fcfs")
    pulls = {r["request"]: r["t"] for r in res.log.of_kind("pull")}
    assert [pulls[f"r{k}"] for k in range(3)] == [0.0, 0.0, 0.0]
    assert pulls["r3"] > 0.6


def test_next_group_of_other_model_waits_for_swap():
    spec = two_model_spec()
    rs = [req(f"x{k}", model="x", slo=500, o=20) for k in range(3)]
    rs += [req(f"y{k}", t=0.01, model="y", slo=500, o=20) for k in range(3)]
    res = run_simulation(Trace.from_requests(rs), [spec], policy="qlm")
    (done,) = res.log.of_kind("swap-done")
    y_pulls = [r["t"] for r in res.log.of_kind("pull") if r["request"].startswith("y")]
    x_done = [res.completion[f"x{k}"] for k in range(3)]
    assert min(y_pulls) >= done["t"]
    assert max(x_done) <= res.log.of_kind("swap-start")[0]["t"]
    assert res.swaps == 1
    assert check_invariants(res) == []


def test_warm_swap_occupies_instance():
    # x drains for ~30 s, longer than the 30 s storage-to-CPU prefetch of y
    spec = two_model_spec(max_output_tokens=1000)
    rs = [req(f"x{k}", model="x", slo=500, o=300) for k in range(2)]
    rs += [req("y0", t=0.01, model="y", slo=500, o=5)]
    res = run_simulation(Trace.from_requests(rs), [spec], policy="qlm")
    (start,) = res.log.of_kind("swap-start")
    (done,) = res.log.of_kind("swap-done")
    # y was prefetched while x drained, so only the CPU-to-GPU leg remains
    assert [r["model"] for r in res.log.of_kind("prefetch")][:1] == ["y"]
    assert start["warm"] is True and start["duration"] == pytest.approx(20.0)
    assert done["t"] - start["t"] == pytest.approx(20.0)
    busy = [r for r in res.log.of_kind("first-token", "completion", "pull")
            if start["t"] < r["t"] < done["t"]]
    assert busy == []


def test_cold_swap_costs_both_legs():
    spec = two_model_spec()
    rs = [req("x0", model="x", slo=500, o=5), req("y0", t=0.01, model="y", slo=500, o=5)]
    res = run_simulation(Trace.from_requests(rs), [spec], policy="qlm", warm_prefetch=False)
    (start,) = res.log.of_kind("swap-start")
    assert start["warm"] is False and start["duration"] == pytest.approx(30.0 + 20.0)


def _paused(trace, cluster, policy="qlm", until=0.05, **kw):
    sim = Simulator(trace, cluster, SimConfig(policy=policy, horizon=until, **kw))
    sim.run()
    return sim


def test_swap_to_resident_is_noop():
    sim = _paused(Trace.from_requests([]), [two_model_spec()])
    assert sim.lso_swap_model("i0", "x") == []
    assert sim.swaps == 0
    with pytest.raises(ConfigError):
        sim.lso_swap_model("i0", "nope")


def test_direct_swap_is_exclusive():
    sim = _paused(Trace.from_requests([]), [two_model_spec()])
    ev = sim.lso_swap_model("i0", "y")
    assert [e["kind"] for e in ev] == ["swap-start"]
    assert sim.by_id["i0"].busy_until - sim.now == pytest.approx(50.0)


def test_evict_empty_batch_noop():
    sim = _paused(Trace.from_requests([]), [make_profile()])
    assert sim.lso_evict("i0", "g-none") == []
    assert sim.evictions == 0


def test_pull_on_full_instance_noop():
    rs = [req(f"r{k}", i=9, o=5) for k in range(4)]
    sim = _paused(Trace.from_requests(rs), [make_profile(token_capacity=30)], policy="fcfs", until=0.1)
    assert sim.lso_pull("i0") == []


def test_eviction_preserves_progress(vicuna):
    # a saturated batch group holds the GPU when an interactive request arrives
    rs = [Request(f"b{k:03d}", 0.0, "vicuna-13b", 3600.0, 200 + k, 2000, slo_class="batch") for k in range(60)]
    rs.append(Request("int0", 30.0, "vicuna-13b", 20.0, 100, 50, slo_class="interactive"))
    res = run_simulation(Trace.from_requests(rs), [vicuna], policy="qlm")
    assert res.evictions > 0
    assert res.wasted_tokens == 0
    assert check_invariants(res) == []
    wait = res.first_token["int0"] - 30.0
    assert wait <= vicuna.prefill + 2 * vicuna.decode_per_token * vicuna.inefficiency + 1e-9


def test_identical_plan_is_idempotent(vicuna):
    tr = queued_trace(40, seed=1)
    sim = _paused(tr, [vicuna, vicuna], until=0.5)
    queues = {i.id: list(i.groups) for i in sim.insts}
    n = len(sim.log)
    sim.apply_plan(SchedulePlan(queues, {}, {}, 0.0, 0.0, 0.0, 10))
    assert len(sim.log) == n
    assert {i.id: i.groups for i in sim.insts} == queues


def test_stale_plan_dropped(vicuna):
    tr = queued_trace(40, seed=1)
    sim = _paused(tr, [vicuna, vicuna], until=0.5)
    before = {i.id: list(i.groups) for i in sim.insts}
    with pytest.raises(StalePlanError):
        sim.apply_plan(SchedulePlan({"i0": ["no-such-group"]}, {}, {}, 0.0, 0.0, 0.0, 10))
    assert {i.id: i.groups for i in sim.insts} == before


def test_moving_waiting_group(vicuna):
    # three groups, each large enough to fill an instance on its own
    rs = [Request(f"{c}{k:03d}", 0.0, "vicuna-13b", slo, 400, 50, slo_class=c)
          for c, slo in (("a", 20.0), ("b", 600.0), ("c", 3600.0)) for k in range(80)]
    sim = _paused(Trace.from_requests(rs), [vicuna, vicuna], until=0.0)
    waiting = [g for i in sim.insts for g in i.groups
               if all(m.state == "queued" for m in sim.group_members[g])]
    assert waiting
    gid = waiting[0]
    src = sim.insts[sim.group_queue[gid]]
    dst = next(i for i in sim.insts if i is not src)
    queues = {i.id: [g for g in i.groups if g != gid] for i in sim.insts}
    queues[dst.id].append(gid)
    sim.apply_plan(SchedulePlan(queues, {}, {}, 0.0, 0.0, 0.0, 10))
    assert gid in dst.groups and gid not in src.groups


def test_groups_never_split():
    rep, res = run_point(ExperimentConfig.preset("W_B").raw, "qlm", 0)
    where: dict[str, set] = {}
    for r in res.log.of_kind("pull", "restore"):
        where.setdefault(r["group"], set()).add(r["instance"])
    assert all(len(v) == 1 for v in where.values())
    # swap minimality: each group's model is loaded at most once
    per_group = Counter(r["group"] for r in res.log.of_kind("swap-start"))
    assert max(per_group.values()) == 1
    assert res.swaps <= res.planned_transitions
    assert check_invariants(res) == []


@pytest.mark.parametrize("policy", ["qlm", "edf", "fcfs", "static"])
def test_failure_reroutes_without_loss(vicuna, policy):
    tr = queued_trace(80, seed=3)
    res = run_simulation(tr, [vicuna, vicuna], policy=policy, failures=((5.0, "i0"),))
    assert len(res.log.of_kind("instance-failed")) == 1
    assert len(res.completion) == 80
    assert check_invariants(res) == []
    late = [r for r in res.log.of_kind("pull") if r["t"] >= 5.0]
    assert late and all(r["instance"] == "i1" for r in late)


def test_unknown_failure_instance():
    with pytest.raises(ConfigError):
        run_simulation(Trace.from_requests([req("a")]), [make_profile()], failures=((1.0, "zz"),))


def test_oversized_request_rejected():
    tr = Trace.from_requests([req("big", i=2000, o=5), req("ok")])
    res = run_simulation(tr, [make_profile()], policy="qlm")
    (rej,) = res.log.of_kind("reject")
    assert rej["request"] == "big" and rej["reason"]
    assert res.rejected == ["big"] and "ok" in res.completion
    assert check_invariants(res) == []


def test_horizon_stops_early(vicuna):
    tr = queued_trace(100, seed=4)
    res = run_simulation(tr, [vicuna], policy="qlm", horizon=10.0)
    assert max(r["t"] for r in res.log) <= 10.0
    assert len(res.completion) < 100
    assert check_invariants(res, require_complete=False) == []


def test_unknown_policy():
    with pytest.raises(ConfigError):
        SimConfig(policy="lottery")
    assert SimConfig(policy="static_batch").policy == "static"


def test_capacity_invariant_on_preset_runs():
    for policy in ("qlm", "fcfs"):
        rep, res = run_point(ExperimentConfig.preset("W_A").raw, policy, 1)
        assert res.violations == []
        assert check_invariants(res) == []
