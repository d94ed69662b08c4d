"""Experiment configuration, scenario presets, sweeps and the runner.

Configs are YAML documents. A config may start from a preset (``preset:
W_A``) and override any key. Arrival rates are given either absolutely
(``arrival_rate``, requests/s) or as a ``share`` of ``workload.load`` times
the cluster's nominal capacity (sum over instances of theta / mean output
tokens), since absolute production rates are not public.

Hardware constants for the built-in models are illustrative desk-scale
values, not measurements; theta and the inefficiency factor are always
obtained by profiling the simulator.
"""

from __future__ import annotations

import copy
import csv
import functools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .core import ConfigError, InstanceProfile, InstanceSpec, TokenStats
from .grouping import GroupingConfig
from .metrics import MetricsReport, emit_report, metrics_from_result
from .profiling import measure_profile
from .sim import SimConfig, SimResult, run_simulation
from .workload import (
    SHAREGPT_INPUT,
    SHAREGPT_OUTPUT,
    SloClassConfig,
    TokenDistParams,
    Trace,
    WorkloadConfig,
    generate_workload,
    inject_mega_prompts,
)

log = logging.getLogger(__name__)

DEFAULT_STATS = TokenStats(mean_output=338.0, std_output=338.0, mean_input=161.0, std_input=193.2)

# decode s/token, prefill s, KV token capacity, cold swap s, warm swap s, KV bytes->tokens/s
HARDWARE: dict[tuple[str, str], dict[str, float]] = {
    ("mistral-7b", "a100"): dict(decode_per_token=0.02, prefill=0.05, token_capacity=40000,
                                 swap_cold=30.0, swap_warm=5.0, kv_transfer_bandwidth=2e5),
    ("vicuna-13b", "a100"): dict(decode_per_token=0.03, prefill=0.08, token_capacity=24000,
                                 swap_cold=40.0, swap_warm=8.0, kv_transfer_bandwidth=1.5e5),
    ("llama-70b", "a100"): dict(decode_per_token=0.06, prefill=0.2, token_capacity=12000,
                                swap_cold=120.0, swap_warm=20.0, kv_transfer_bandwidth=5e4),
    ("mistral-7b", "a10"): dict(decode_per_token=0.04, prefill=0.1, token_capacity=8000,
                                swap_cold=40.0, swap_warm=6.0, kv_transfer_bandwidth=1e5),
    ("vicuna-13b", "a10"): dict(decode_per_token=0.07, prefill=0.18, token_capacity=4000,
                                swap_cold=60.0, swap_warm=10.0, kv_transfer_bandwidth=8e4),
}


def hardware_profile(model: str, gpu: str, overrides: Mapping[str, Any] | None = None) -> InstanceProfile:
    """Unprofiled constants (theta=1, inefficiency=1 placeholders)."""
    base = dict(HARDWARE.get((model, gpu), {}))
    base.update(overrides or {})
    missing = {"decode_per_token", "prefill", "token_capacity", "swap_cold", "swap_warm",
               "kv_transfer_bandwidth"} - set(base)
    if missing:
        raise ConfigError(f"no hardware constants for ({model}, {gpu}); missing {sorted(missing)}")
    base.setdefault("max_output_tokens", 2048)
    base.setdefault("theta", 1.0)
    base.setdefault("inefficiency", 1.0)
    return InstanceProfile(model=model, gpu_type=gpu, **base)


@functools.lru_cache(maxsize=64)
def _profiled(model: str, gpu: str, overrides: tuple, stats: tuple) -> InstanceProfile:
    hw = hardware_profile(model, gpu, dict(overrides))
    return measure_profile(model, gpu, TokenStats(*stats), hw)


def profiled(model: str, gpu: str, overrides: Mapping[str, Any] | None = None,
             stats: TokenStats = DEFAULT_STATS) -> InstanceProfile:
    """Hardware constants plus measured theta/inefficiency (cached)."""
    ov = dict(overrides or {})
    if "theta" in ov and "inefficiency" in ov:
        return hardware_profile(model, gpu, ov)
    key = tuple(sorted((k, v) for k, v in ov.items() if k not in ("theta", "inefficiency")))
    return _profiled(model, gpu, key, (stats.mean_output, stats.std_output, stats.mean_input, stats.std_input))


def _cls(name, slo, share, models, **kw) -> dict:
    return {"name": name, "slo": slo, "share": share, "models": models, **kw}


PRESETS: dict[str, dict[str, Any]] = {
    "W_A": {
        "description": "single model, interactive + batch classes, overload relative to capacity",
        "workload": {
            "duration": 120.0,
            "load": 2.4,
            "classes": [
                _cls("interactive", 20.0, 0.5, {"vicuna-13b": 1.0}),
                _cls("batch-1", 60.0, 0.25, {"vicuna-13b": 1.0}),
                _cls("batch-2", 3600.0, 0.25, {"vicuna-13b": 1.0}),
            ],
        },
        "cluster": [{"id": f"i{k}", "gpu_type": "a100", "models": ["vicuna-13b"]} for k in range(2)],
    },
    "W_B": {
        "description": "multi-model batch classes, interleaved models on shared instances",
        "workload": {
            "duration": 120.0,
            "load": 0.8,
            "classes": [
                _cls("batch-1", 60.0, 0.5, {"mistral-7b": 0.5, "llama-70b": 0.5}),
                _cls("batch-2", 3600.0, 0.5, {"vicuna-13b": 0.5, "llama-70b": 0.5}),
            ],
        },
        "cluster": [
            {"id": f"i{k}", "gpu_type": "a100", "models": ["mistral-7b", "vicuna-13b", "llama-70b"],
             "initial_model": "vicuna-13b"}
            for k in range(2)
        ],
    },
    "W_C": {
        "description": "single-model mixed workload with injected mega prompts (3K-4K tokens)",
        "workload": {
            "duration": 120.0,
            "load": 1.3,
            "mega_fraction": 0.02,
            "classes": [
                _cls("interactive", 20.0, 0.5, {"vicuna-13b": 1.0}),
                _cls("batch-1", 60.0, 0.25, {"vicuna-13b": 1.0}),
                _cls("batch-2", 3600.0, 0.25, {"vicuna-13b": 1.0}),
            ],
        },
        "cluster": [{"id": f"i{k}", "gpu_type": "a100", "models": ["vicuna-13b"]} for k in range(4)],
    },
}

DEFAULTS: dict[str, Any] = {
    "policy": "qlm",
    "seeds": [0],
    "sweep": {},
    "out": "results",
    "workers": 1,
    "profiles": {},
    "sim": {},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _get(d: Any, dotted: str) -> Any:
    cur = d
    for part in dotted.split("."):
        if isinstance(cur, list):
            cur = cur[int(part)]
        elif isinstance(cur, Mapping) and part in cur:
            cur = cur[part]
        else:
            raise KeyError(dotted)
    return cur


def _set(d: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur: Any = d
    for part in parts[:-1]:
        cur = cur[int(part)] if isinstance(cur, list) else cur[part]
    last = parts[-1]
    if isinstance(cur, list):
        cur[int(last)] = value
    else:
        cur[last] = value


@dataclass
class ExperimentConfig:
    raw: dict[str, Any]
    policy: str
    seeds: list[int]
    sweep: dict[str, list[Any]]
    out: Path
    workers: int = 1
    source: str = ""

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], source: str = "") -> ExperimentConfig:
        d = dict(d)
        preset = d.pop("preset", None)
        base = DEFAULTS
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
            base = _merge(DEFAULTS, PRESETS[preset])
        raw = _merge(base, d)
        if "workload" not in raw or "cluster" not in raw:
            raise ConfigError("config needs 'workload' and 'cluster' (or a preset)")
        seeds = raw["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        if not seeds:
            raise ConfigError("at least one seed required")
        sweep = {k: list(v) for k, v in (raw.get("sweep") or {}).items()}
        for key, values in sweep.items():
            try:
                _get(raw, key)
            except (KeyError, IndexError, ValueError):
                raise ConfigError(f"sweep axis {key!r} is not a config key") from None
            if not values:
                raise ConfigError(f"sweep axis {key!r} has no values")
        cfg = cls(raw=raw, policy=raw["policy"], seeds=[int(s) for s in seeds], sweep=sweep,
                  out=Path(raw["out"]), workers=int(raw.get("workers", 1)), source=source)
        build_cluster(raw)  # validate early
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {p}: {e}") from e
        data = yaml.safe_load(text) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{p}: top level must be a mapping")
        return cls.from_dict(data, source=str(p))

    @classmethod
    def preset(cls, name: str, **over: Any) -> ExperimentConfig:
        return cls.from_dict({"preset": name, **over})

    def points(self) -> list[tuple[str, dict[str, Any]]]:
        """(label, raw config) per sweep point, in grid order."""
        if not self.sweep:
            return [("base", self.raw)]
        keys = list(self.sweep)
        out = []
        for combo in product(*(self.sweep[k] for k in keys)):
            raw = copy.deepcopy(self.raw)
            for k, v in zip(keys, combo):
                _set(raw, k, v)
            out.append((",".join(f"{k}={v}" for k, v in zip(keys, combo)), raw))
        return out


def build_cluster(raw: Mapping[str, Any]) -> list[InstanceSpec]:
    specs = []
    overrides = raw.get("profiles") or {}
    for k, inst in enumerate(raw["cluster"]):
        gpu = inst.get("gpu_type", "a100")
        models = inst.get("models")
        if not models:
            raise ConfigError(f"cluster entry {k}: no models")
        profs = {m: profiled(m, gpu, overrides.get(m)) for m in models}
        specs.append(InstanceSpec(
            id=str(inst.get("id", f"i{k}")),
            gpu_type=gpu,
            profiles=profs,
            initial_model=inst.get("initial_model", models[0]),
            warm_slots=int(inst.get("warm_slots", 1)),
        ))
    return specs


def nominal_capacity(cluster: list[InstanceSpec], mean_output: float = DEFAULT_STATS.mean_output) -> float:
    """Requests/s the cluster sustains if each instance serves its initial model."""
    return sum(s.profile(s.initial_model or next(iter(s.profiles))).theta / mean_output for s in cluster)


def _token_dist(d: Mapping[str, Any] | None) -> TokenDistParams:
    if not d:
        return TokenDistParams()
    d = dict(d)
    fam = d.get("family", "lognormal")
    return TokenDistParams(
        family=fam,
        input=tuple(d.get("input", SHAREGPT_INPUT)),
        output=tuple(d.get("output", SHAREGPT_OUTPUT)),
        max_total=int(d.get("max_total", 4096)),
        max_output=int(d.get("max_output", 2048)),
    )


def build_workload(raw: Mapping[str, Any], cluster: list[InstanceSpec], seed: int) -> Trace:
    w = raw["workload"]
    cap = nominal_capacity(cluster)
    load = float(w.get("load", 1.0))
    classes = []
    for c in w["classes"]:
        if "arrival_rate" in c:
            rate = float(c["arrival_rate"])
        elif "share" in c:
            rate = float(c["share"]) * load * cap
        else:
            raise ConfigError(f"class {c.get('name')}: give arrival_rate or share")
        classes.append(SloClassConfig(
            name=c["name"], slo=float(c["slo"]), arrival_rate=rate, models=dict(c["models"]),
            token_dist=_token_dist(c.get("token_dist")),
            rate_schedule=tuple(tuple(x) for x in c.get("rate_schedule", ())),
        ))
    trace = generate_workload(WorkloadConfig(float(w["duration"]), tuple(classes), seed=seed))
    frac = float(w.get("mega_fraction", 0.0))
    if frac > 0:
        limit = max(p.token_capacity for s in cluster for p in s.profiles.values())
        trace = inject_mega_prompts(trace, frac, seed=seed, capacity_limit=limit)
    return trace


def sim_config(raw: Mapping[str, Any], policy: str, seed: int) -> SimConfig:
    opts = dict(raw.get("sim") or {})
    g = opts.pop("grouping", None)
    if g is not None:
        opts["grouping"] = GroupingConfig(**g)
    if "failures" in opts:
        opts["failures"] = tuple((float(t), str(i)) for t, i in opts["failures"])
    try:
        return SimConfig(policy=policy, seed=seed, **opts)
    except TypeError as e:
        raise ConfigError(f"bad sim option: {e}") from None


def run_point(raw: Mapping[str, Any], policy: str, seed: int, label: str = "base") -> tuple[MetricsReport, SimResult]:
    cluster = build_cluster(raw)
    trace = build_workload(raw, cluster, seed)
    cfg = sim_config(raw, policy, seed)
    from .sim import Simulator

    res = Simulator(trace, cluster, cfg).run()
    return metrics_from_result(res, point=label), res


def _run_one(args) -> tuple[MetricsReport, list[str], str]:
    raw, policy, seed, label = args
    rep, res = run_point(raw, policy, seed, label)
    return rep, res.violations, res.log.to_jsonl()


@dataclass
class ExperimentResult:
    reports: list[MetricsReport]
    violations: dict[str, list[str]] = field(default_factory=dict)
    out: Path | None = None

    @property
    def ok(self) -> bool:
        return not any(self.violations.values())


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_.=" else "_" for ch in label)


def run_experiment(config: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Run every (sweep point, seed); write reports, aggregates and event logs."""
    jobs = [(raw, config.policy, seed, label) for label, raw in config.points() for seed in config.seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            outs = list(ex.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]
    reports = [o[0] for o in outs]
    result = ExperimentResult(reports, {f"{j[3]}/seed={j[2]}": o[1] for j, o in zip(jobs, outs)})
    if not write:
        return result
    out = config.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        emit_report(reports, "csv", out / "metrics.csv")
        emit_report(reports, "json", out / "metrics.json")
        emit_report(reports, "csv", out / "timing.csv", timing=True)
        write_aggregate(reports, out / "aggregate.csv")
        write_summary(reports, out / "summary.csv")
        logs = out / "events"
        logs.mkdir(exist_ok=True)
        for j, o in zip(jobs, outs):
            (logs / f"{_slug(j[3])}-seed{j[2]}.jsonl").write_text(o[2])
        (out / "config.yaml").write_text(yaml.safe_dump(config.raw, sort_keys=True))
        (out / "violations.json").write_text(json.dumps(result.violations, sort_keys=True, indent=1) + "\n")
    except OSError as e:
        raise OSError(f"writing results to {out}: {e}") from e
    result.out = out
    return result


_AGG_COLS = ("point", "seed", "policy", "attainment_all", "throughput", "drain_time", "completed",
             "swaps", "evictions", "preemptions", "estimator_r2")


def _agg_values(r: MetricsReport) -> dict[str, Any]:
    return {"point": r.point, "seed": r.seed, "policy": r.policy, "attainment_all": r.overall_attainment,
            "throughput": r.throughput, "drain_time": r.drain_time, "completed": r.completed,
            "swaps": r.swaps, "evictions": r.evictions, "preemptions": r.preemptions,
            "estimator_r2": r.estimator_r2}


def write_aggregate(reports: list[MetricsReport], path: Path) -> None:
    """One row per (sweep point, seed)."""
    from .metrics import _fmt

    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(_AGG_COLS)
        for r in reports:
            v = _agg_values(r)
            w.writerow([_fmt(v[c]) for c in _AGG_COLS])


def write_summary(reports: list[MetricsReport], path: Path) -> None:
    """Mean and sample std over seeds, one row per sweep point."""
    from .metrics import _fmt

    metrics = _AGG_COLS[3:]
    by_point: dict[str, list[MetricsReport]] = {}
    for r in reports:
        by_point.setdefault(r.point, []).append(r)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["point", "policy", "n_seeds"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for point, rs in by_point.items():
            row: list[Any] = [point, rs[0].policy, len(rs)]
            for m in metrics:
                xs = np.array([np.nan if _agg_values(r)[m] is None else _agg_values(r)[m] for r in rs], float)
                row += [float(np.mean(xs)), float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0]
            w.writerow([_fmt(x) for x in row])
