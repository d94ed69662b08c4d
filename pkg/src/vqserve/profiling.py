"""Offline profiling: measure throughput and batching inefficiency by simulation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, InstanceProfile, Request, TokenStats
from .workload import Trace, lognormal_params


WARMUP = 0.2


@dataclass(frozen=True)
class ProfileMeasurement:
    profile: InstanceProfile
    avg_batch_size: float
    window: float
    n_requests: int


def _lengths(rng: np.random.Generator, mean: float, std: float, n: int, lo: int, hi: int) -> np.ndarray:
    if std <= 0:
        return np.clip(np.full(n, round(mean)), lo, hi).astype(int)
    mu, sigma = lognormal_params(mean, std / mean)
    return np.clip(np.rint(rng.lognormal(mu, sigma, n)), lo, hi).astype(int)


def saturating_trace(stats: TokenStats, hardware: InstanceProfile, n_requests: int, seed: int = 0) -> Trace:
    rng = np.random.default_rng(seed)
    cap = hardware.token_capacity
    out_cap = min(hardware.max_output_tokens, cap // 2)
    outs = _lengths(rng, stats.mean_output, stats.std_output, n_requests, 1, out_cap)
    ins = _lengths(rng, stats.mean_input, stats.std_input, n_requests, 1, cap - 1)
    ins = np.minimum(ins, cap - outs)
    reqs = [
        Request(f"p{k:05d}", 0.0, hardware.model, 1e9, int(i), int(o), slo_class="profile")
        for k, (i, o) in enumerate(zip(ins, outs))
    ]
    return Trace.from_requests(reqs, provenance=f"profiling seed={seed}")


def measure_profile_detail(
    model: str,
    gpu_type: str,
    stats: TokenStats,
    hardware: InstanceProfile,
    n_requests: int | None = None,
    seed: int = 0,
) -> ProfileMeasurement:
    from .sim import run_simulation

    if hardware.model != model or hardware.gpu_type != gpu_type:
        hardware = dataclasses.replace(hardware, model=model, gpu_type=gpu_type)
    if n_requests is None:
        n_requests = max(512, int(16 * hardware.token_capacity / stats.mean_footprint))
    if n_requests < 2:
        raise ConfigError("profiling needs at least 2 requests")
    trace = saturating_trace(stats, hardware, n_requests, seed)
    res = run_simulation(trace, [hardware], policy="fcfs", seed=seed, record_iterations=True,
                         warm_prefetch=False)
    if res.violations:
        raise RuntimeError(f"profiling run broke invariants: {res.violations[:3]}")
    iters = next(iter(res.iterations.values()))
    # steady state: while the queue is non-empty, after a warm-up fifth
    last_admit = max(res.admitted.values())
    window = [(s, d, n, b) for s, d, n, b in iters if WARMUP * last_admit <= s < last_admit]
    if not window:
        window = iters
    span = sum(d for _, d, _, _ in window)
    theta = sum(n for _, _, n, _ in window) / span
    # seconds per token, token-weighted, over requests admitted in the window
    lo = WARMUP * last_admit
    inside = [r for r in trace.requests if lo <= res.admitted[r.id] < last_admit] or trace.requests
    busy = sum(res.completion[r.id] - res.admitted[r.id] - hardware.prefill for r in inside)
    eps = max(1.0, busy / sum(r.output_tokens for r in inside) / hardware.decode_per_token)
    batch = sum(b * d for _, d, _, b in window) / span
    prof = dataclasses.replace(hardware, theta=theta, inefficiency=eps)
    return ProfileMeasurement(prof, batch, span, n_requests)


def measure_profile(model, gpu_type, stats, hardware, n_requests=None, seed=0) -> InstanceProfile:
    return measure_profile_detail(model, gpu_type, stats, hardware, n_requests, seed).profile


def ideal_theta(hardware: InstanceProfile, stats: TokenStats) -> float:
    """Upper bound: a full batch decoding every iteration, no prefill stalls."""
    return math.floor(hardware.token_capacity / stats.mean_footprint) / hardware.decode_per_token
