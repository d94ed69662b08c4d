"""Request groups: k-means clustering, size-capped splitting, online assignment."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import ConfigError, Request, TokenStats

log = logging.getLogger(__name__)


class GroupState(str, enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    COMPLETE = "complete"


@dataclass
class RequestGroup:
    """A homogeneous set of same-model requests, served FCFS.

    ``centroid`` is kept in log space: (log slo, log input tokens, log class
    mean output tokens), so distances are scale-free and comparable across
    clustering batches.
    """

    id: str
    model: str
    slo: float
    members: list[str]
    stats: TokenStats
    centroid: np.ndarray
    slo_class: str | None = None
    created_at: float = 0.0
    state: GroupState = GroupState.WAITING
    member_inputs: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def sort_key(self) -> tuple[float, str]:
        return (self.created_at, self.id)


@dataclass(frozen=True)
class GroupingConfig:
    k: int | None = None
    group_size_multiple: float = 4.0
    avg_batch_size: float = 32.0
    seed: int = 0
    max_iter: int = 50
    n_init: int = 10
    slo_tolerance: float = 1.5  # online joins only within this SLO ratio

    def __post_init__(self) -> None:
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.group_size_multiple < 1:
            raise ConfigError("group_size_multiple must be >= 1")
        if not self.avg_batch_size > 0:
            raise ConfigError("avg_batch_size must be > 0")
        if self.slo_tolerance < 1:
            raise ConfigError("slo_tolerance must be >= 1")

    @property
    def max_size(self) -> int:
        return max(1, int(math.floor(self.group_size_multiple * self.avg_batch_size)))

    @classmethod
    def for_profile(cls, token_capacity: int, stats: TokenStats, **kw) -> GroupingConfig:
        """avg_batch_size = tokens that fit in GPU memory / mean tokens per request."""
        return cls(avg_batch_size=token_capacity / stats.mean_footprint, **kw)


class TokenHistory:
    """Per (model, SLO class) token statistics with a scenario-level fallback."""

    def __init__(self, by_class: Mapping[tuple[str, str], TokenStats] | None = None,
                 default: TokenStats | None = None):
        self.by_class = dict(by_class or {})
        self.default = default

    def lookup(self, model: str, class_key: str) -> TokenStats:
        st = self.by_class.get((model, class_key))
        if st is not None:
            return st
        if self.default is None:
            raise ConfigError(f"no token history for ({model}, {class_key}) and no default")
        log.warning("no token history for (%s, %s); using scenario default", model, class_key)
        return self.default

    def peek(self, model: str, class_key: str) -> TokenStats | None:
        return self.by_class.get((model, class_key), self.default)

    @classmethod
    def from_requests(cls, requests: Iterable[Request]) -> TokenHistory:
        from .workload import fit_token_stats

        reqs = list(requests)
        buckets: dict[tuple[str, str], list[Request]] = {}
        for r in reqs:
            buckets.setdefault((r.model, r.class_key), []).append(r)
        by_class = {k: fit_token_stats(v) for k, v in buckets.items() if len(v) >= 2}
        default = fit_token_stats(reqs) if len(reqs) >= 2 else None
        return cls(by_class, default)


class GroupIds:
    """Deterministic group id allocator (one per simulation/run)."""

    def __init__(self, prefix: str = "g"):
        self.prefix = prefix
        self.n = 0

    def __call__(self) -> str:
        gid = f"{self.prefix}{self.n:06d}"
        self.n += 1
        return gid


def _features(r: Request, history: TokenHistory | None) -> np.ndarray:
    st = history.peek(r.model, r.class_key) if history is not None else None
    out_mean = st.mean_output if st is not None else 1.0
    return np.array([math.log(r.slo), math.log(r.input_tokens), math.log(out_mean)])


def _lloyd(points: np.ndarray, c: np.ndarray, max_iter: int) -> tuple[np.ndarray, float]:
    labels = np.full(len(points), -1)
    dist = None
    for _ in range(max_iter):
        dist = ((points[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(c)):
            mask = labels == j
            if mask.any():
                c[j] = points[mask].mean(axis=0)
    dist = ((points[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(dist, axis=1)
    return labels, float(dist[np.arange(len(points)), labels].sum())


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 50, n_init: int = 10) -> np.ndarray:
    """Lloyd's algorithm from ``n_init`` k-means++ seedings; lowest inertia wins.

    Ties go to the lowest index everywhere, so results depend only on
    (points, k, seed).
    """
    n = len(points)
    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray] | None = None
    for _ in range(max(1, n_init)):
        centers = [int(rng.integers(n))]
        d2 = ((points - points[centers[0]]) ** 2).sum(axis=1)
        while len(centers) < k:
            total = d2.sum()
            if total <= 0:
                nxt = int(np.argmax(d2))
            else:
                nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
                nxt = min(nxt, n - 1)
            centers.append(nxt)
            d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
        labels, inertia = _lloyd(points, points[centers].astype(float).copy(), max_iter)
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, labels)
    return best[1]


def _split(members: list[Request], max_size: int) -> list[list[Request]]:
    if len(members) <= max_size:
        return [members]
    half = (len(members) + 1) // 2
    return _split(members[:half], max_size) + _split(members[half:], max_size)


def _make_group(gid: str, members: list[Request], history: TokenHistory | None, now: float) -> RequestGroup:
    feats = np.array([_features(r, history) for r in members])
    first = members[0]
    stats = _stats_for(first.model, first.class_key, [r.input_tokens for r in members], history)
    return RequestGroup(
        id=gid,
        model=first.model,
        slo=min(r.slo for r in members),
        members=[r.id for r in members],
        stats=stats,
        centroid=feats.mean(axis=0),
        slo_class=first.class_key,
        created_at=now,
        member_inputs=[r.input_tokens for r in members],
    )


def form_request_groups(
    requests: Sequence[Request],
    config: GroupingConfig,
    history: TokenHistory | None = None,
    ids: GroupIds | None = None,
    now: float | None = None,
) -> list[RequestGroup]:
    """Cluster requests into groups, then split any oversized group in halves.

    Model is a hard partition. Within a model the features are z-scored log
    values of (slo, input tokens, class mean output tokens). Output lengths of
    individual requests are never used.
    """
    if not requests:
        raise ConfigError("form_request_groups needs at least one request")
    ids = ids or GroupIds()
    now = min(r.arrival_time for r in requests) if now is None else now
    by_model: dict[str, list[Request]] = {}
    for r in sorted(requests, key=lambda r: (r.arrival_time, r.id)):
        by_model.setdefault(r.model, []).append(r)

    clusters: list[list[Request]] = []
    for model in sorted(by_model):
        reqs = by_model[model]
        raw = np.array([_features(r, history) for r in reqs])
        if config.k is None:
            k = len({(r.slo_class, r.slo) for r in reqs})
        else:
            k = config.k
        distinct = len(np.unique(raw, axis=0))
        if k > distinct:
            log.warning("k=%d exceeds %d distinct feature points for model %s; reducing", k, distinct, model)
            k = distinct
        std = raw.std(axis=0)
        std[std == 0] = 1.0
        z = (raw - raw.mean(axis=0)) / std
        labels = kmeans(z, k, seed=config.seed, max_iter=config.max_iter, n_init=config.n_init)
        for j in range(k):
            members = [r for r, lab in zip(reqs, labels) if lab == j]
            if members:
                clusters.append(members)

    groups: list[RequestGroup] = []
    for members in sorted(clusters, key=lambda m: (m[0].arrival_time, m[0].id)):
        for part in _split(members, config.max_size):
            groups.append(_make_group(ids(), part, history, now))
    return groups


def assign_incoming(
    request: Request,
    groups: dict[str, RequestGroup],
    config: GroupingConfig,
    history: TokenHistory | None = None,
    ids: GroupIds | None = None,
    now: float | None = None,
) -> str:
    """Append ``request`` to the nearest compatible live group, or start a new one.

    Compatible: same model, not complete, under the size cap, and SLO within
    ``config.slo_tolerance`` (ratio). ``groups`` is updated in place.
    """
    gid = find_group(request, groups, config, history)
    if gid is None:
        ids = ids or GroupIds()
        g = _make_group(ids(), [request], history, request.arrival_time if now is None else now)
        groups[g.id] = g
        return g.id
    g = groups[gid]
    n = len(g.members)
    g.centroid = (g.centroid * n + _features(request, history)) / (n + 1)
    g.members.append(request.id)
    g.member_inputs.append(request.input_tokens)
    g.slo = min(g.slo, request.slo)
    g.stats = _stats_for(g.model, g.slo_class or request.class_key, g.member_inputs, history, g.stats)
    return gid


def find_group(
    request: Request,
    groups: Mapping[str, RequestGroup],
    config: GroupingConfig,
    history: TokenHistory | None = None,
) -> str | None:
    f = _features(request, history)
    best: tuple[float, tuple[float, str]] | None = None
    best_id = None
    for g in groups.values():
        if g.model != request.model or g.state is GroupState.COMPLETE:
            continue
        if len(g.members) >= config.max_size:
            continue
        if max(g.slo, request.slo) / min(g.slo, request.slo) > config.slo_tolerance:
            continue
        d = float(((g.centroid - f) ** 2).sum())
        key = (d, g.sort_key)
        if best is None or key < best:
            best, best_id = key, g.id
    return best_id


def _stats_for(
    model: str,
    class_key: str,
    inputs: Sequence[int],
    history: TokenHistory | None,
    fallback: TokenStats | None = None,
) -> TokenStats:
    out = history.peek(model, class_key) if history is not None else None
    if out is None:
        out = fallback
    arr = np.asarray(inputs, float)
    mean_in = float(arr.mean())
    std_in = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    if out is None:
        # no output history at all: only the input side is informative
        return TokenStats(mean_output=1.0, std_output=0.0, mean_input=mean_in, std_input=std_in)
    return TokenStats(out.mean_output, out.std_output, mean_in, std_in)


def group_token_stats(
    group: RequestGroup, history: TokenHistory, inputs: Sequence[int] | None = None
) -> TokenStats:
    """Output stats from history for the group's (model, class); input stats from members."""
    if not group.members:
        raise ConfigError(f"group {group.id} is empty")
    out = history.lookup(group.model, group.slo_class or f"slo={group.slo:g}s")
    arr = np.asarray(inputs if inputs is not None else group.member_inputs, float)
    std_in = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return TokenStats(out.mean_output, out.std_output, float(arr.mean()), std_in)
