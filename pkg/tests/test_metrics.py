import csv
import io
import json

import numpy as np
import pytest

from conftest import req
from vqserve.experiment import ExperimentConfig, run_experiment
from vqserve.metrics import (
    COLUMNS,
    MetricsReport,
    compute_metrics,
    emit_report,
    load_json_reports,
    nearest_rank,
    r_squared,
    render_csv,
    render_json,
)
from vqserve.workload import Trace


def small_config(tmp_path, **over):
    raw = ExperimentConfig.preset("W_A").raw
    raw["workload"]["duration"] = 20.0
    raw.update({"out": str(tmp_path / "out"), **over})
    return ExperimentConfig.from_dict(raw)


def test_hand_built_log():
    tr = Trace.from_requests([req("a", t=0.0, slo=2.0, cls="i"), req("b", t=1.0, slo=1.0, cls="i")])
    log = [
        {"t": 0.0, "kind": "arrival", "request": "a"},
        {"t": 1.0, "kind": "arrival", "request": "b"},
        {"t": 1.5, "kind": "first-token", "request": "a"},
        {"t": 3.0, "kind": "first-token", "request": "b"},
        {"t": 4.0, "kind": "completion", "request": "a"},
    ]
    rep = compute_metrics(log, tr)
    # a: ttft 1.5 <= 2 met; b: ttft 2.0 > 1 missed
    assert rep.attainment == {"i": 0.5}
    assert rep.p99_ttft == {"i": 2.0}
    assert rep.completed == 1 and rep.partial
    assert rep.drain_time == 4.0
    assert rep.throughput == 0.25
    assert rep.swaps == rep.evictions == rep.preemptions == 0
    assert rep.estimator_r2 is None


def test_all_met():
    tr = Trace.from_requests([req("a", slo=5.0, cls="x"), req("b", slo=5.0, cls="y")])
    log = [{"t": 1.0, "kind": "first-token", "request": r} for r in "ab"]
    log += [{"t": 2.0, "kind": "completion", "request": r} for r in "ab"]
    rep = compute_metrics(log, tr)
    assert rep.attainment == {"x": 1.0, "y": 1.0}
    assert not rep.partial


def test_ninety_nine_of_hundred():
    rs = [req(f"r{k:03d}", t=0.0, slo=10.0, cls="c") for k in range(100)]
    ttft = [0.05 * (k + 1) for k in range(99)] + [50.0]
    log = [{"t": t, "kind": "first-token", "request": f"r{k:03d}"} for k, t in enumerate(ttft)]
    rep = compute_metrics(log, Trace.from_requests(rs))
    assert rep.attainment["c"] == pytest.approx(0.99)
    assert rep.p99_ttft["c"] == sorted(ttft)[98]


def test_nearest_rank():
    xs = list(range(1, 11))
    assert nearest_rank(xs, 50) == 5
    assert nearest_rank(xs, 99) == 10
    assert nearest_rank(xs, 0) == 1
    assert np.isnan(nearest_rank([], 99))


def test_r_squared_line():
    x = np.arange(10.0)
    assert r_squared(x, 3 * x + 1) == pytest.approx(1.0)
    assert r_squared([1, 2], [1, 2]) is None
    assert r_squared([1, 1, 1], [1, 2, 3]) is None


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport({"c": 1.5}, {}, 0.0, 0.0, 0, 0, 0, 0, None)
    with pytest.raises(ValueError):
        MetricsReport({}, {}, 0.0, 0.0, 0, -1, 0, 0, None)


def test_empty_csv_is_header_only(tmp_path):
    p = emit_report([], "csv", tmp_path / "m.csv")
    assert p.read_text() == ",".join(COLUMNS) + "\n"


def test_json_round_trip(tmp_path):
    res = run_experiment(small_config(tmp_path), write=False)
    reps = res.reports
    p = emit_report(reps, "json", tmp_path / "m.json")
    back = load_json_reports(p)
    assert render_json(back) == render_json(reps)
    assert back[0].attainment == {k: float(f"{v:.6g}") for k, v in reps[0].attainment.items()}


def test_csv_long_format():
    rep = MetricsReport({"a": 0.5, "b": 1.0}, {"a": 1.0 / 3, "b": 2.0}, 1.23456789, 10.0, 3, 1, 0, 0, 0.9,
                        point="p", seed=2, policy="qlm")
    rows = list(csv.reader(io.StringIO(render_csv([rep]))))
    assert tuple(rows[0]) == COLUMNS
    assert ["p", "2", "qlm", "p99_ttft", "a", "0.333333"] in rows
    assert ["p", "2", "qlm", "throughput", "", "1.23457"] in rows
    assert all(len(r) == len(COLUMNS) for r in rows)


def test_identical_bytes_across_runs(tmp_path):
    a = run_experiment(small_config(tmp_path, out=str(tmp_path / "a")))
    b = run_experiment(small_config(tmp_path, out=str(tmp_path / "b")))
    for name in ("metrics.csv", "metrics.json", "aggregate.csv", "summary.csv"):
        assert (a.out / name).read_bytes() == (b.out / name).read_bytes(), name
    for f in sorted((a.out / "events").iterdir()):
        assert f.read_bytes() == (b.out / "events" / f.name).read_bytes()


def test_throughput_times_makespan_is_completed(tmp_path):
    res = run_experiment(small_config(tmp_path), write=False)
    for r in res.reports:
        assert round(r.throughput * r.drain_time) == r.completed


def test_three_seeds(tmp_path):
    cfg = small_config(tmp_path, seeds=[0, 1, 2])
    res = run_experiment(cfg)
    assert len(res.reports) == 3 and res.ok
    agg = list(csv.DictReader((res.out / "aggregate.csv").open()))
    assert len(agg) == 3
    summary = list(csv.DictReader((res.out / "summary.csv").open()))
    assert len(summary) == 1 and summary[0]["n_seeds"] == "3"
    vals = [float(r["throughput"]) for r in agg]
    assert float(summary[0]["throughput_mean"]) == pytest.approx(np.mean(vals), rel=1e-5)
    assert float(summary[0]["throughput_std"]) == pytest.approx(np.std(vals, ddof=1), rel=1e-4)
    assert json.loads((res.out / "violations.json").read_text()) == {k: [] for k in res.violations}
    assert (res.out / "config.yaml").exists()


@pytest.mark.parametrize("policy", ["qlm", "edf", "fcfs", "static"])
def test_load_sweep_monotone(tmp_path, policy):
    cfg = small_config(tmp_path, policy=policy, sweep={"workload.load": [0.25, 0.5, 1, 2]})
    res = run_experiment(cfg, write=False)
    assert len(res.reports) == 4
    att = [r.overall_attainment for r in res.reports]
    assert all(b <= a + 1e-12 for a, b in zip(att, att[1:])), att


def test_missing_out_dir_created(tmp_path):
    cfg = small_config(tmp_path, out=str(tmp_path / "deep" / "er" / "dir"))
    res = run_experiment(cfg)
    assert (tmp_path / "deep" / "er" / "dir" / "metrics.csv").exists()
    assert res.out == tmp_path / "deep" / "er" / "dir"


def test_timing_kept_separate(tmp_path):
    res = run_experiment(small_config(tmp_path))
    assert "solver_wall_time" not in (res.out / "metrics.csv").read_text()
    assert "solver_wall_time" in (res.out / "timing.csv").read_text()


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], "xml", tmp_path / "m.xml")
