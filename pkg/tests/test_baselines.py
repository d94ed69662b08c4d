import copy

import numpy as np
import pytest

from conftest import make_profile, req
from vqserve.baselines import (
    edf_order,
    fcfs_order,
    static_batch_duration,
    static_batch_schedule,
)
from vqserve.core import ConfigError, InstanceSpec, Request
from vqserve.experiment import ExperimentConfig, profiled, run_point
from vqserve.invariants import check_invariants
from vqserve.sim import run_simulation
from vqserve.workload import TokenDistParams, Trace


def test_edf_sorts_by_deadline():
    rs = [req("a", slo=30), req("b", slo=10), req("c", slo=20)]
    assert edf_order(rs, ["i0"]).order("i0") == ["b", "c", "a"]


def test_edf_ties_by_arrival():
    rs = [req("late", t=5.0, slo=10), req("early", t=0.0, slo=15)]
    assert edf_order(rs, ["i0"]).order("i0") == ["early", "late"]


def test_fcfs_arrival_order():
    rs = [req("c", t=2), req("a", t=0), req("b", t=1)]
    assert fcfs_order(rs, ["i0"]).order("i0") == ["a", "b", "c"]


def test_single_request_same_everywhere():
    r = [req("a")]
    assert edf_order(r, ["i0"]).queues == fcfs_order(r, ["i0"]).queues


def test_equal_slos_coincide():
    rng = np.random.default_rng(0)
    rs = [req(f"r{k}", t=float(t), slo=60) for k, t in enumerate(rng.uniform(0, 10, 30))]
    a = edf_order(rs, ["i0", "i1"])
    b = fcfs_order(rs, ["i0", "i1"])
    assert a.queues == b.queues
    tr = Trace.from_requests(rs)
    p = make_profile(token_capacity=60)
    ra = run_simulation(tr, [p, p], policy="edf")
    rb = run_simulation(tr, [p, p], policy="fcfs")
    assert ra.first_token == rb.first_token


def test_round_robin_respects_models():
    rs = [req("a", model="x"), req("b", model="y"), req("c", model="x", t=1)]
    dec = fcfs_order(rs, ["i0", "i1"], serves={"i0": {"x"}, "i1": {"x", "y"}})
    assert dec.order("i0") == ["a"]
    assert dec.order("i1") == ["b", "c"]
    with pytest.raises(ConfigError):
        fcfs_order([req("z", model="w")], ["i0"], serves={"i0": {"x"}})


def test_static_batches():
    rs = [req(f"r{k}", t=k, slo=100 - 10 * k, model="xy"[k % 2]) for k in range(5)]
    dec = static_batch_schedule(rs, ["i0"], batch_size=2)
    batches = [[r.id for r in b] for b in dec.batches["i0"]]
    assert sorted(sum(batches, [])) == [f"r{k}" for k in range(5)]
    assert all(len(b) <= 2 for b in batches)
    assert all(len({r.model for r in b}) == 1 for b in dec.batches["i0"])
    firsts = [b[0].deadline for b in dec.batches["i0"]]
    assert firsts == sorted(firsts)
    with pytest.raises(ConfigError):
        static_batch_schedule(rs, ["i0"], batch_size=0)


def test_static_batch_duration_formula():
    p = make_profile(prefill=0.5, max_output_tokens=2048, inefficiency=1.2, decode_per_token=0.025)
    assert static_batch_duration(p) == pytest.approx(0.5 + 61.44)
    res = run_simulation(Trace.from_requests([req("a", t=1.0), req("b", t=1.2)]),
                         [make_profile(inefficiency=1.2)], policy="static", static_batch_size=1)
    starts = [r["t"] for r in res.log.of_kind("batch-start")]
    assert starts == pytest.approx([1.0, 1.0 + 0.5 + 100 * 1.2 * 0.1])


def test_static_lower_throughput_than_continuous():
    raw = ExperimentConfig.preset("W_A").raw
    raw["workload"]["duration"] = 40.0
    cont, _ = run_point(raw, "fcfs", 0)
    stat, res = run_point(raw, "static", 0)
    assert stat.throughput < cont.throughput
    assert check_invariants(res) == []


def test_static_needs_more_instances():
    raw = ExperimentConfig.preset("W_A").raw
    raw["workload"]["duration"] = 30.0
    for c, rate in zip(raw["workload"]["classes"], (3.0, 1.5, 1.5)):
        c.pop("share")
        c["arrival_rate"] = rate
    att = {}
    for n in (1, 6):
        r = copy.deepcopy(raw)
        r["cluster"] = [{"id": f"i{k}", "gpu_type": "a100", "models": ["vicuna-13b"]} for k in range(n)]
        for pol in ("qlm", "static"):
            att[pol, n] = run_point(r, pol, 0)[0].overall_attainment
    assert att["static", 6] > att["static", 1]
    assert att["qlm", 1] > att["static", 6]


def _interleaved(n=30):
    ov = {"swap_warm": 20.0, "swap_cold": 40.0}
    pa, pb = profiled("mistral-7b", "a100", ov), profiled("vicuna-13b", "a100", ov)
    spec = InstanceSpec("i0", "a100", {"mistral-7b": pa, "vicuna-13b": pb}, "mistral-7b", warm_slots=1)
    rng = np.random.default_rng(4)
    td = TokenDistParams()
    rs = []
    for k in range(n):
        i, o = td.sample(rng)
        m = ["mistral-7b", "vicuna-13b"][k % 2]
        rs.append(Request(f"r{k:03d}", 0.5 * k, m, 600.0, i, o, slo_class=m))
    return Trace.from_requests(rs), spec


@pytest.mark.parametrize("policy", ["edf", "fcfs"])
def test_interleaved_models_swap_per_alternation(policy):
    tr, spec = _interleaved()
    res = run_simulation(tr, [spec], policy=policy)
    # one swap for every model change in the arrival sequence
    assert res.swaps == len(tr) - 1
    assert check_invariants(res) == []


def test_fcfs_head_of_line_blocking(vicuna):
    rs = [Request(f"b{k:03d}", 0.0, "vicuna-13b", 3600.0, 200 + k, 2000, slo_class="batch") for k in range(60)]
    rs.append(Request("int0", 30.0, "vicuna-13b", 20.0, 100, 50, slo_class="interactive"))
    tr = Trace.from_requests(rs)
    fcfs = run_simulation(tr, [vicuna], policy="fcfs")
    qlm = run_simulation(tr, [vicuna], policy="qlm")
    assert fcfs.first_token["int0"] - 30.0 > 20.0
    assert qlm.first_token["int0"] - 30.0 < 1.0
