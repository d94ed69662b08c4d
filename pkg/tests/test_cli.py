import csv
import json
import logging
import subprocess
import sys

import pytest
import yaml

from conftest import make_profile, req
from vqserve.cli import main
from vqserve.workload import Trace, dump_trace


def write_config(tmp_path, **over):
    cfg = {"preset": "W_A", "workload": {"duration": 15.0}}
    cfg.update(over)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_simulate_writes_results(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "res"
    assert main(["simulate", "--config", str(cfg), "--policy", "edf", "--seed", "3", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "seed=3 edf" in text and "attainment" in text
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert {r["policy"] for r in rows} == {"edf"} and {r["seed"] for r in rows} == {"3"}
    assert (out / "events").is_dir() and (out / "config.yaml").exists()


def test_simulate_preset_only(tmp_path):
    out = tmp_path / "res"
    assert main(["simulate", "--preset", "W_B", "--policy", "static_batch", "--out", str(out)]) == 0
    assert (out / "metrics.json").exists()


def test_sweep(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "sw"
    rc = main(["sweep", "--config", str(cfg), "--axis", "workload.load=0.5,2", "--seeds", "0", "1",
               "--out", str(out)])
    assert rc == 0
    agg = list(csv.DictReader((out / "aggregate.csv").open()))
    assert len(agg) == 4
    assert len({r["point"] for r in agg}) == 2


def test_sweep_bad_axis_key(tmp_path, capsys):
    cfg = write_config(tmp_path)
    rc = main(["sweep", "--config", str(cfg), "--axis", "workload.nope=1,2", "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "workload.nope" in capsys.readouterr().err


def test_sweep_malformed_axis(tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", "--preset", "W_A", "--axis", "novalue"])


def test_missing_config_file(tmp_path, capsys):
    rc = main(["simulate", "--config", str(tmp_path / "absent.yaml")])
    assert rc == 2
    assert "absent.yaml" in capsys.readouterr().err


def test_profile(tmp_path, capsys):
    out = tmp_path / "prof.json"
    assert main(["profile", "--model", "vicuna-13b", "--gpu", "a100", "--out", str(out)]) == 0
    prof = json.loads(out.read_text())
    assert prof["model"] == "vicuna-13b" and prof["theta"] > 0 and prof["inefficiency"] >= 1
    assert json.loads(capsys.readouterr().out) == prof


def test_profile_unknown_pair(capsys):
    assert main(["profile", "--model", "llama-70b", "--gpu", "a10"]) == 2


def test_estimate(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    dump_trace(Trace.from_requests([req(f"r{k}", t=k, i=50 + k, o=20 + 3 * k) for k in range(6)]), trace)
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps(make_profile().to_dict()))
    assert main(["estimate", "--trace", str(trace), "--profile", str(prof), "--positions", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "position,wait_mean,wait_std,completion"
    rows = [list(map(float, ln.split(","))) for ln in lines[1:]]
    assert [r[0] for r in rows] == [1, 2, 3, 4]
    assert rows[0][1] == 0.0
    assert all(b[1] > a[1] for a, b in zip(rows, rows[1:]))


def test_log_level_env(tmp_path, monkeypatch):
    monkeypatch.setenv("VQSERVE_LOG_LEVEL", "debug")
    logging.getLogger().handlers.clear()
    main(["simulate", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")])
    assert logging.getLogger().level == logging.DEBUG


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "vqserve", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("simulate", "profile", "sweep", "estimate"):
        assert cmd in r.stdout
