"""Command line entry point.

    vqserve simulate --config cfg.yaml --policy qlm --seed 0 --out results/
    vqserve profile  --model vicuna-13b --gpu a100 --config cfg.yaml
    vqserve sweep    --config cfg.yaml --axis workload.load=0.5,1,2 --out sweep/
    vqserve estimate --trace trace.jsonl --profile profile.json

Log verbosity comes from ``VQSERVE_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .core import ConfigError, InstanceProfile
from .estimator import estimate_request_completion, estimate_waiting_time
from .experiment import DEFAULT_STATS, ExperimentConfig, profiled, run_experiment
from .profiling import measure_profile_detail
from .workload import fit_token_stats, load_trace


def _parse_value(text: str):
    v = yaml.safe_load(text)
    return text if v is None else v


def _axis(spec: str) -> tuple[str, list]:
    if "=" not in spec:
        raise argparse.ArgumentTypeError(f"axis must look like key=v1,v2 (got {spec!r})")
    key, vals = spec.split("=", 1)
    return key.strip(), [_parse_value(v.strip()) for v in vals.split(",") if v.strip()]


def _load_config(path: str | None, **over) -> ExperimentConfig:
    data = {}
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
    data.update({k: v for k, v in over.items() if v is not None})
    if "preset" not in data and "workload" not in data:
        data["preset"] = "W_A"
    return ExperimentConfig.from_dict(data, source=path or "")


def _report(res) -> int:
    for r in res.reports:
        att = ", ".join(f"{k}={v:.3f}" for k, v in sorted(r.attainment.items()))
        print(f"{r.point} seed={r.seed} {r.policy}: attainment [{att}] "
              f"throughput={r.throughput:.4g} req/s drain={r.drain_time:.4g}s swaps={r.swaps}")
    if res.out is not None:
        print(f"results written to {res.out}")
    if not res.ok:
        for run, v in res.violations.items():
            for msg in v[:5]:
                print(f"invariant violation in {run}: {msg}", file=sys.stderr)
        return 3
    return 0


def cmd_simulate(a) -> int:
    cfg = _load_config(a.config, policy=a.policy, seeds=[a.seed] if a.seed is not None else None,
                       out=a.out, preset=a.preset)
    return _report(run_experiment(cfg))


def cmd_sweep(a) -> int:
    sweep = dict(a.axis)
    cfg = _load_config(a.config, out=a.out, preset=a.preset, policy=a.policy)
    if a.seeds:
        cfg = ExperimentConfig.from_dict({**cfg.raw, "seeds": a.seeds, "sweep": {**cfg.sweep, **sweep}})
    else:
        cfg = ExperimentConfig.from_dict({**cfg.raw, "sweep": {**cfg.sweep, **sweep}})
    return _report(run_experiment(cfg))


def cmd_profile(a) -> int:
    overrides = {}
    stats = DEFAULT_STATS
    if a.config:
        data = yaml.safe_load(Path(a.config).read_text()) or {}
        overrides = (data.get("profiles") or {}).get(a.model, {})
    from .experiment import hardware_profile

    hw = hardware_profile(a.model, a.gpu, overrides)
    m = measure_profile_detail(a.model, a.gpu, stats, hw, n_requests=a.requests, seed=a.seed)
    out = m.profile.to_dict()
    out["avg_batch_size"] = m.avg_batch_size
    text = json.dumps(out, indent=1, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_estimate(a) -> int:
    trace = load_trace(a.trace)
    prof = InstanceProfile.from_dict(json.loads(Path(a.profile).read_text()))
    stats = fit_token_stats(trace)
    print("position,wait_mean,wait_std,completion")
    n = len(trace) if a.positions is None else min(a.positions, len(trace))
    for k in range(1, n + 1):
        w = estimate_waiting_time(k - 1, stats, prof)
        c = estimate_request_completion(k, stats, prof)
        print(f"{k},{w.mean:.6g},{w.std:.6g},{c:.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vqserve", description="SLO-aware LLM serving simulator")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one configuration")
    s.add_argument("--config")
    s.add_argument("--preset", choices=["W_A", "W_B", "W_C"])
    s.add_argument("--policy", choices=["qlm", "edf", "fcfs", "static", "static_batch"])
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("profile", help="measure theta and inefficiency for a model/GPU pair")
    s.add_argument("--model", required=True)
    s.add_argument("--gpu", required=True)
    s.add_argument("--config")
    s.add_argument("--requests", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("sweep", help="grid over config keys")
    s.add_argument("--config")
    s.add_argument("--preset", choices=["W_A", "W_B", "W_C"])
    s.add_argument("--policy", choices=["qlm", "edf", "fcfs", "static", "static_batch"])
    s.add_argument("--axis", action="append", type=_axis, required=True, help="key=v1,v2,... (repeatable)")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("estimate", help="print per-position waiting time estimates")
    s.add_argument("--trace", required=True)
    s.add_argument("--profile", required=True)
    s.add_argument("--positions", type=int)
    s.set_defaults(func=cmd_estimate)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("VQSERVE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
