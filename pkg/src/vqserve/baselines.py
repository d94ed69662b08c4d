"""Baseline policies: FCFS (vLLM default), EDF, and SHEPHERD-style static batching.

The static batching policy only reproduces the fixed-size, deterministic
duration assumption; SHEPHERD's own preemption and ILP placement are not
modelled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import ConfigError, InstanceProfile, Request


@dataclass
class PolicyDecision:
    """Per-instance ordered request lists plus any requested actuator ops."""

    queues: dict[str, list[Request]]
    batches: dict[str, list[list[Request]]] = field(default_factory=dict)
    ops: list[tuple[str, str]] = field(default_factory=list)

    def order(self, instance: str) -> list[str]:
        return [r.id for r in self.queues.get(instance, [])]


def _deal(
    waiting: Sequence[Request],
    instances: Sequence[str],
    serves: Mapping[str, set[str]] | None,
) -> dict[str, list[Request]]:
    """Round-robin requests (in arrival order) over instances able to serve their model."""
    if not instances:
        raise ConfigError("no instances")
    out: dict[str, list[Request]] = {i: [] for i in instances}
    counters: dict[str, int] = {}
    for r in sorted(waiting, key=lambda r: (r.arrival_time, r.id)):
        eligible = [i for i in instances if serves is None or r.model in serves.get(i, ())]
        if not eligible:
            raise ConfigError(f"no instance can serve model {r.model}")
        k = counters.get(r.model, 0)
        counters[r.model] = k + 1
        out[eligible[k % len(eligible)]].append(r)
    return out


def edf_key(r: Request) -> tuple[float, float, str]:
    return (r.deadline, r.arrival_time, r.id)


def fcfs_key(r: Request) -> tuple[float, str]:
    return (r.arrival_time, r.id)


def edf_order(
    waiting: Sequence[Request],
    instances: Sequence[str],
    serves: Mapping[str, set[str]] | None = None,
) -> PolicyDecision:
    """Earliest absolute deadline (arrival + slo) first; ties by arrival."""
    dealt = _deal(waiting, instances, serves)
    return PolicyDecision({i: sorted(rs, key=edf_key) for i, rs in dealt.items()})


def fcfs_order(
    waiting: Sequence[Request],
    instances: Sequence[str],
    serves: Mapping[str, set[str]] | None = None,
) -> PolicyDecision:
    dealt = _deal(waiting, instances, serves)
    return PolicyDecision({i: sorted(rs, key=fcfs_key) for i, rs in dealt.items()})


def static_batch_duration(profile: InstanceProfile) -> float:
    """Deterministic worst-case batch time: prefill plus a full-length decode."""
    return profile.prefill + profile.max_output_tokens * profile.inefficiency * profile.decode_per_token


def static_batch_schedule(
    waiting: Sequence[Request],
    instances: Sequence[str],
    batch_size: int,
    serves: Mapping[str, set[str]] | None = None,
) -> PolicyDecision:
    """Fixed-size same-model batches, ordered by their earliest member deadline."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    dec = edf_order(waiting, instances, serves)
    for inst, rs in dec.queues.items():
        by_model: dict[str, list[Request]] = {}
        for r in rs:
            by_model.setdefault(r.model, []).append(r)
        batches = [ms[k:k + batch_size] for ms in by_model.values() for k in range(0, len(ms), batch_size)]
        batches.sort(key=lambda b: edf_key(b[0]))
        dec.batches[inst] = batches
        dec.queues[inst] = [r for b in batches for r in b]
    return dec
