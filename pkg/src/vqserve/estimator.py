"""Request waiting time estimation from token statistics and profile constants.

The estimator sees only :class:`TokenStats` and :class:`InstanceProfile`
constants, never per-request output lengths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .core import ConfigError, InstanceProfile, SloViolationReport, TokenStats


@dataclass(frozen=True)
class WaitEstimate:
    mean: float
    std: float
    basis_tokens: float

    def quantile(self, z: float) -> float:
        return max(0.0, self.mean + z * self.std)


@dataclass(frozen=True)
class GroupCompletionEstimate:
    serve_time: float
    completion_time: float


def estimate_waiting_time(ahead: int, stats: TokenStats, profile: InstanceProfile) -> WaitEstimate:
    """Wait behind ``ahead`` requests: the sum of their output tokens over throughput.

    The token sum is treated as Normal((n) mu, (n) sigma^2).
    """
    if ahead < 0:
        raise ConfigError("number of requests ahead must be >= 0")
    tokens = ahead * stats.mean_output
    return WaitEstimate(
        mean=tokens / profile.theta,
        std=math.sqrt(ahead) * stats.std_output / profile.theta,
        basis_tokens=tokens,
    )


def estimate_decode_time(profile: InstanceProfile, stats: TokenStats | None = None, mode: str = "max") -> float:
    """Decode time of one request, ``O * eps * d``.

    ``mode="max"`` (default) uses the model's generation cap for ``O``, which
    bounds the true decode time from above. ``mode="mean"`` uses the mean
    output length instead and is only meant for sensitivity studies.
    """
    if mode == "max":
        tokens = profile.max_output_tokens
    elif mode == "mean":
        if stats is None:
            raise ConfigError("mean-mode decode estimate needs token stats")
        tokens = stats.mean_output
    else:
        raise ConfigError(f"unknown decode estimate mode {mode!r}")
    return tokens * profile.inefficiency * profile.decode_per_token


def estimate_request_completion(
    queue_position: int, stats: TokenStats, profile: InstanceProfile, mode: str = "max"
) -> float:
    """Completion time of the request at 1-based ``queue_position``: wait + prefill + decode."""
    if queue_position < 1:
        raise ConfigError("queue_position is 1-based")
    wait = estimate_waiting_time(queue_position - 1, stats, profile).mean
    return wait + profile.prefill + estimate_decode_time(profile, stats, mode)


def estimate_group_completion(
    group_size: int | object,
    stats: TokenStats | None,
    profile: InstanceProfile,
    groups_ahead_tokens: float = 0.0,
    mode: str = "max",
) -> GroupCompletionEstimate:
    """Serve and completion time of a request group.

    ``serve_time`` is the group's own token drain, ``n * mu_o / theta``.
    ``completion_time`` adds the prefill and the decode bound of the
    last-finishing member (and any ``groups_ahead_tokens`` of work queued in
    front). ``group_size`` may be a count or a group object (its ``len`` and
    ``stats`` are used).
    """
    if not isinstance(group_size, int):
        stats = stats or group_size.stats
        group_size = len(group_size)
    if group_size < 1:
        raise ConfigError("group must be nonempty")
    if stats is None:
        raise ConfigError("token stats required")
    serve = group_size * stats.mean_output / profile.theta
    ahead = groups_ahead_tokens / profile.theta
    tail = profile.prefill + estimate_decode_time(profile, stats, mode)
    return GroupCompletionEstimate(serve_time=ahead + serve, completion_time=ahead + serve + tail)


def compose_waits(
    serve: Sequence[float],
    completion: Sequence[float],
    models: Sequence[str | None],
    swap_cost: Callable[[str], float] | Mapping[str, float],
    resident: str | None,
) -> list[float]:
    """Predicted wait of each slot in one virtual queue.

    A group ahead contributes its serve time when the next group uses the
    same model (requests pipeline into the running batch), and its full
    completion time when a model transition follows it (the batch must drain
    before weights are swapped). Every transition up to and including the
    slot itself adds the swap time of the incoming model. Slots with model
    ``None`` are empty padding: they cost nothing and are invisible to
    transitions.
    """
    cost = swap_cost.__getitem__ if isinstance(swap_cost, Mapping) else swap_cost
    waits: list[float] = []
    acc = 0.0
    prev_model = resident
    prev_idx: int | None = None
    for j, m in enumerate(models):
        if m is None:
            waits.append(acc)
            continue
        if m != prev_model:
            if prev_idx is not None:
                acc += completion[prev_idx]
            acc += cost(m)
        elif prev_idx is not None:
            acc += serve[prev_idx]
        waits.append(acc)
        prev_model, prev_idx = m, j
    return waits


def detect_slo_violation(
    virtual_queues: Mapping[str, Sequence[object]],
    estimates: Mapping[tuple[str, str], GroupCompletionEstimate],
    swap_model: Mapping[str, Mapping[str, float]],
    resident: Mapping[str, str | None] | None = None,
    slack_budget: Mapping[str, float] | None = None,
    report_all: bool = False,
) -> list[SloViolationReport]:
    """Predict each queued group's wait and report those past their SLO.

    ``virtual_queues`` maps queue id to ordered groups (anything with ``id``,
    ``model`` and ``slo``). ``estimates`` is keyed by (group id, queue id).
    ``swap_model[q][m]`` is the cost of loading model ``m`` on queue ``q``.
    ``slack_budget`` optionally overrides a group's SLO with its remaining
    budget (SLO minus time already waited).
    """
    resident = resident or {}
    seen: set[str] = set()
    reports: list[SloViolationReport] = []
    for qid in sorted(virtual_queues):
        groups = list(virtual_queues[qid])
        for g in groups:
            if g.id in seen:
                raise ConfigError(f"group {g.id} appears in more than one queue position")
            seen.add(g.id)
        est = [estimates[(g.id, qid)] for g in groups]
        waits = compose_waits(
            [e.serve_time for e in est],
            [e.completion_time for e in est],
            [g.model for g in groups],
            swap_model[qid],
            resident.get(qid),
        )
        for g, w in zip(groups, waits):
            budget = slack_budget.get(g.id, g.slo) if slack_budget else g.slo
            rep = SloViolationReport(group=g.id, queue=qid, predicted_wait=w, slo=budget)
            if report_all or rep.violated:
                reports.append(rep)
    return reports


def profile_instance(
    model: str,
    gpu_type: str,
    stats: TokenStats,
    hardware: InstanceProfile,
    n_requests: int | None = None,
    seed: int = 0,
) -> InstanceProfile:
    """Measure throughput and inefficiency from one saturated simulated batch.

    ``hardware`` supplies the directly logged constants (decode time per
    token, prefill, capacity, swap times, KV bandwidth, output cap); its
    ``theta`` and ``inefficiency`` are ignored and replaced by measurements.
    """
    from .profiling import measure_profile

    return measure_profile(model, gpu_type, stats, hardware, n_requests=n_requests, seed=seed)
