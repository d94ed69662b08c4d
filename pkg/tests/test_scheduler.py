import dataclasses
import itertools
import time
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqserve.core import ConfigError
from vqserve.estimator import GroupCompletionEstimate, compose_waits
from vqserve.experiment import profiled
from _problems import rand_problem
from vqserve.scheduler import (
    AssignmentProblem,
    PlanValidationError,
    SchedulePlan,
    brute_force_oracle,
    build_problem,
    plan_penalty,
    solve_exact,
    solve_heuristic,
    solve_milp,
)


def problem(serve, slo, models=None, swap=0.0, nq=1, length=None, resident=None, completion=None,
            weight=100.0):
    ng = len(serve)
    models = models or ["x"] * ng
    names = sorted(set(models))
    length = length or ng
    comp = completion if completion is not None else serve
    return AssignmentProblem(
        queues=[f"q{k}" for k in range(nq)],
        groups=[f"g{i}" for i in range(ng)],
        models=names,
        group_model=[names.index(m) for m in models],
        slo=list(map(float, slo)),
        serve=np.tile(np.asarray(serve, float), (nq, 1)),
        completion=np.tile(np.asarray(comp, float), (nq, 1)),
        swap=np.full((nq, len(names)), float(swap)),
        resident=[names.index(resident) if resident else -1 for _ in range(nq)] if resident
        else [names.index(models[0]) if ng else -1] * nq,
        length=length,
        violation_weight=weight,
    )


# ----------------------------------------------------------------------- examples


def test_two_same_model_groups():
    # both orders total -105; the deterministic tie-break keeps creation order
    pb = problem([5, 5], [10, 100])
    plan = solve_exact(pb)
    assert plan.queues["q0"] == ["g0", "g1"]
    assert plan.predicted_wait["q0"] == [0.0, 5.0]
    assert plan.penalties["q0"] == [-10.0, -95.0]
    assert plan.objective == pytest.approx(-105.0)
    assert plan.feasible
    assert brute_force_oracle(pb).queues == plan.queues


def test_grouped_models_adjacent():
    pb = problem([10, 10, 10], [500, 500, 500], models=["x", "y", "x"], swap=20.0, resident="x")
    for solver in (solve_exact, solve_heuristic, brute_force_oracle):
        plan = solver(pb)
        seq = [pb.models[pb.group_model[pb.groups.index(g)]] for g in plan.queues["q0"]]
        assert seq == ["x", "x", "y"], solver.__name__
        assert plan.transitions(pb) == 1


def test_all_padding_zero():
    pb = problem([], [], length=3)
    for solver in (solve_exact, solve_heuristic, brute_force_oracle):
        plan = solver(pb)
        assert plan.objective == 0.0
        assert plan.queues == {"q0": []}
        assert plan.assignment == {("q0", 0): None, ("q0", 1): None, ("q0", 2): None}


def test_single_group_single_slot():
    pb = problem([7], [30])
    plan = brute_force_oracle(pb)
    assert plan.queues == {"q0": ["g0"]}
    assert plan.objective == -30.0


def test_symmetric_instance_permutation_invariant():
    pb = problem([4, 4, 4], [50, 50, 50], length=3)
    best = brute_force_oracle(pb).objective
    for perm in itertools.permutations(pb.groups):
        plan = SchedulePlan({"q0": list(perm)}, {}, {}, 0.0, 0.0, 0.0, 3)
        assert plan_penalty(plan, pb) == pytest.approx(best)


def test_plan_penalty_empty_and_duplicates():
    pb = problem([], [], length=2)
    assert plan_penalty(SchedulePlan({"q0": []}, {}, {}, 0.0, 0.0, 0.0, 2), pb) == 0.0
    pb = problem([5, 5], [10, 10])
    bad = SchedulePlan({"q0": ["g0", "g0"]}, {}, {}, 0.0, 0.0, 0.0, 2)
    with pytest.raises(PlanValidationError):
        plan_penalty(bad, pb)
    with pytest.raises(PlanValidationError, match="unassigned"):
        plan_penalty(SchedulePlan({"q0": ["g0"]}, {}, {}, 0.0, 0.0, 0.0, 2), pb)


def test_plan_penalty_matches_exact():
    for seed in range(30):
        pb = rand_problem(seed)
        plan = solve_exact(pb)
        assert plan_penalty(plan, pb) == pytest.approx(plan.objective, abs=1e-9)


# ----------------------------------------------------------------------- build_problem


def _groups(specs):
    return [SimpleNamespace(id=g, model=m, slo=s, sort_key=(k, g)) for k, (g, m, s) in enumerate(specs)]


def test_build_problem_pads():
    gs = _groups([("a", "x", 10), ("b", "x", 20), ("c", "x", 30)])
    est = {(g.id, q): GroupCompletionEstimate(5.0, 6.0) for g in gs for q in ("q0", "q1")}
    pb = build_problem(gs, ["q0", "q1"], est, {"q0": {"x": 1}, "q1": {"x": 1}}, {"q0": "x", "q1": "x"}, length=2)
    assert pb.n_slots == 4 and pb.n_padding == 1
    plan = solve_exact(pb)
    assert sorted(g for s in plan.queues.values() for g in s) == ["a", "b", "c"]
    assert sum(v is None for v in plan.assignment.values()) == 1


def test_padding_never_transitions():
    # a plan with gaps between groups on the same model costs no swaps
    waits = compose_waits([5, 0, 5], [6, 0, 6], ["x", None, "x"], {"x": 20}, "x")
    assert waits[2] == 5


def test_build_problem_missing_estimate_names_pair():
    gs = _groups([("a", "x", 10)])
    with pytest.raises(ConfigError, match="group a on queue q1"):
        build_problem(gs, ["q0", "q1"], {("a", "q0"): GroupCompletionEstimate(1, 1)},
                      {"q0": {"x": 0}, "q1": {"x": 0}}, {"q0": "x", "q1": "x"})


def test_default_length():
    gs = _groups([(f"g{i}", "x", 10) for i in range(5)])
    est = {(g.id, q): GroupCompletionEstimate(1.0, 1.0) for g in gs for q in ("a", "b")}
    pb = build_problem(gs, ["a", "b"], est, {"a": {"x": 0}, "b": {"x": 0}}, {"a": "x", "b": "x"})
    assert pb.length == 3 + 2


def test_heterogeneous_queue_estimates():
    from vqserve.estimator import estimate_group_completion
    from vqserve.experiment import DEFAULT_STATS

    a100 = profiled("vicuna-13b", "a100")
    a10 = profiled("vicuna-13b", "a10")
    fast = estimate_group_completion(100, DEFAULT_STATS, a100)
    slow = estimate_group_completion(100, DEFAULT_STATS, a10)
    assert slow.serve_time / fast.serve_time == pytest.approx(a100.theta / a10.theta, rel=1e-9)
    assert slow.serve_time > fast.serve_time


# ----------------------------------------------------------------------- solvers


def test_exact_matches_oracle_small():
    for seed in range(100):
        pb = rand_problem(seed)
        assert solve_exact(pb).objective == brute_force_oracle(pb).objective, seed


def test_heuristic_bounded_by_exact():
    for seed in range(100):
        pb = rand_problem(seed)
        assert solve_heuristic(pb).objective >= solve_exact(pb).objective - 1e-9


def test_milp_agrees_with_exact():
    for seed in range(15):
        pb = rand_problem(seed)
        assert solve_milp(pb).objective == pytest.approx(solve_exact(pb).objective, abs=1e-6), seed


def test_exact_budget_flags_incumbent():
    rng = np.random.default_rng(3)
    ng, nq = 40, 4
    serve = rng.uniform(1, 40, (nq, ng))
    pb = AssignmentProblem([f"q{k}" for k in range(nq)], [f"g{i}" for i in range(ng)], ["a", "b", "c"],
                           rng.integers(0, 3, ng).tolist(), rng.uniform(0, 300, ng).tolist(),
                           serve, serve + 5, np.full((nq, 3), 20.0), [0, 1, 2, 0], 12)
    t0 = time.perf_counter()
    plan = solve_exact(pb, budget=0.5)
    assert time.perf_counter() - t0 < 2.0
    assert not plan.optimal
    assert plan_penalty(plan, pb) == pytest.approx(plan.objective)


def test_pinned_group_stays():
    pb = dataclasses.replace(rand_problem(7), pinned={})
    pb.pinned = {0: len(pb.queues) - 1}
    for solver in (solve_exact, solve_heuristic, brute_force_oracle):
        plan = solver(pb)
        assert pb.groups[0] in plan.queues[pb.queues[-1]]


def test_json_round_trip():
    pb = rand_problem(11)
    assert AssignmentProblem.from_json(pb.to_json()).to_json() == pb.to_json()
    plan = solve_exact(pb)
    back = SchedulePlan.from_json(plan.to_json())
    assert back.queues == plan.queues and back.objective == plan.objective
    assert plan_penalty(back, pb) == pytest.approx(plan.objective)


def test_grouping_dominance_over_edf_order():
    models = ["x", "y"] * 4
    pb = problem([10] * 8, [2000] * 8, models=models, swap=20.0, resident="x")
    opt = solve_exact(pb)
    edf = SchedulePlan({"q0": pb.groups}, {}, {}, 0.0, 0.0, 0.0, pb.length)
    assert opt.transitions(pb) <= edf.transitions(pb)
    assert opt.transitions(pb) == 1


# ----------------------------------------------------------------------- properties


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_plan_properties(seed):
    pb = rand_problem(seed)
    plan = solve_heuristic(pb)
    flat = [g for s in plan.queues.values() for g in s]
    assert sorted(flat) == sorted(pb.groups)
    assert all(len(s) <= pb.length for s in plan.queues.values())
    for ws in plan.predicted_wait.values():
        assert all(b >= a - 1e-12 for a, b in zip(ws, ws[1:]))
    # transitions equal the number of adjacent model changes
    n = 0
    for qi, q in enumerate(pb.queues):
        ms = [pb.resident[qi]] + [pb.group_model[pb.groups.index(g)] for g in plan.queues[q]]
        n += sum(a != b for a, b in zip(ms, ms[1:]))
    assert plan.transitions(pb) == n
    if plan.feasible:
        gidx = {g: i for i, g in enumerate(pb.groups)}
        for q, seq in plan.queues.items():
            for g, w in zip(seq, plan.predicted_wait[q]):
                assert w - pb.slo[gidx[g]] <= 1e-9
