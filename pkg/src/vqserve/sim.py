"""Deterministic discrete-event simulation of continuous-batching LLM instances.

Time advances in decode iterations. An iteration lasts ``decode_per_token``
seconds for the resident model, plus ``prefill`` when it admits new requests;
every decoding request gains one token per iteration. GPU memory is a token
budget: a running request occupies its prompt plus the tokens generated so
far. Growth past the budget preempts the most recently admitted request; its
KV cache moves to host memory with progress intact.

Four actuators act on an instance, driven by its virtual queue:

* pull     -- admit requests FCFS from the head of the queue while memory allows
* evict    -- move running requests of demoted groups to host memory (async)
* swap     -- replace the resident model (flushes running KV, progress lost)
* balance  -- queue contents come from the global plan

Policies: ``qlm`` (request groups + virtual queues + global scheduler),
``fcfs``, ``edf`` and ``static`` (fixed batches of deterministic length).
"""

from __future__ import annotations

import bisect
import heapq
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .baselines import edf_key, fcfs_key, static_batch_duration
from .core import ConfigError, InstanceProfile, InstanceSpec, Request, TokenStats
from .estimator import compose_waits, detect_slo_violation, estimate_group_completion
from .grouping import (
    GroupingConfig,
    GroupIds,
    GroupState,
    RequestGroup,
    TokenHistory,
    assign_incoming,
    find_group,
    form_request_groups,
)
from .scheduler import SchedulePlan, build_problem, solve_exact, solve_heuristic
from .workload import Trace

log = logging.getLogger(__name__)

POLICIES = ("qlm", "edf", "fcfs", "static")

_NO_SLACK_LIMIT = 1e9  # budget for groups whose members all got a first token


class EventLog:
    """Append-only, time-ordered simulation records."""

    def __init__(self) -> None:
        self.records: list[dict[str, Any]] = []
        self._last_t = -math.inf

    def append(self, t: float, kind: str, **fields: Any) -> None:
        if t < self._last_t - 1e-9:
            raise ValueError(f"event log time went backwards: {t} < {self._last_t}")
        self._last_t = max(self._last_t, t)
        rec = {"t": t, "kind": kind}
        rec.update({k: v for k, v in fields.items() if v is not None})
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[dict[str, Any]]:
        return iter(self.records)

    def of_kind(self, *kinds: str) -> list[dict[str, Any]]:
        return [r for r in self.records if r["kind"] in kinds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> EventLog:
        out = cls()
        for line in text.splitlines():
            if line.strip():
                rec = json.loads(line)
                t, kind = rec.pop("t"), rec.pop("kind")
                out.append(t, kind, **rec)
        return out

    @classmethod
    def read(cls, path: str | Path) -> EventLog:
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class SimConfig:
    policy: str = "qlm"
    seed: int = 0
    horizon: float | None = None
    # qlm knobs
    eviction: bool = True
    warm_prefetch: bool = True
    grouping: GroupingConfig | None = None
    history: TokenHistory | None = None
    exact_groups: int = 6
    solver_budget: float = 2.0
    solve_latency: float = 0.0
    replan_interval: float = 1.0
    violation_weight: float | None = None
    # static batching
    static_batch_size: int | None = None
    # fault injection: (time, instance id)
    failures: tuple[tuple[float, str], ...] = ()
    record_iterations: bool = False

    def __post_init__(self) -> None:
        if self.policy == "static_batch":
            self.policy = "static"
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")


class _Req:
    __slots__ = (
        "r", "state", "generated", "footprint", "admit_seq", "inst", "group", "first_token",
        "ready_at", "evict_done", "work", "fresh", "est_wait", "done_at", "admitted_at",
    )

    def __init__(self, r: Request):
        self.r = r
        self.state = "pending"  # pending|queued|running|restoring|held|done|rejected
        self.generated = 0
        self.footprint = 0
        self.admit_seq = -1
        self.inst = -1
        self.group: str | None = None
        self.first_token: float | None = None
        self.ready_at = 0.0
        self.evict_done = 0.0
        self.work = 0  # tokens computed, including ones later lost to a flush
        self.fresh = False  # admitted this iteration (needs prefill)
        self.est_wait: float | None = None
        self.done_at: float | None = None
        self.admitted_at: float | None = None


class _Instance:
    def __init__(self, idx: int, spec: InstanceSpec):
        self.idx = idx
        self.spec = spec
        self.id = spec.id
        self.resident: str | None = spec.initial_model
        self.warm: dict[str, float] = {}
        self.running: list[_Req] = []  # includes restoring, ordered by admit_seq
        self.held: list[_Req] = []
        self.busy_until = 0.0
        self.swap_target: str | None = None
        self.swap_group: str | None = None  # group whose model is being loaded
        self.iter_end: float | None = None
        self.participants: list[_Req] = []
        self.scheduled: float | None = None  # time of pending boundary event
        self.failed = False
        # qlm
        self.groups: list[str] = []
        self.last_head: str | None = None
        self.head_changed_by_plan = False
        # baselines
        self.queue: list[tuple[Any, _Req]] = []
        self.batch: list[_Req] | None = None
        self.batch_end = 0.0
        # accounting
        self.busy_time = 0.0
        self.tokens = 0
        self.iterations: list[tuple[float, float, int, int]] = []

    @property
    def profile(self) -> InstanceProfile:
        return self.spec.profile(self.resident)  # type: ignore[arg-type]

    def used_next(self) -> int:
        """Tokens reserved once every decoding request grows by one."""
        return sum(q.footprint + (1 if q.state == "running" else 0) for q in self.running)


@dataclass
class SimResult:
    log: EventLog
    trace: Trace
    config: SimConfig
    first_token: dict[str, float]
    completion: dict[str, float]
    admitted: dict[str, float]
    est_wait: dict[str, float]
    violations: list[str]
    swaps: int
    evictions: int
    preemptions: int
    plans: int
    planned_transitions: int
    solver_time: float
    busy_time: dict[str, float]
    wasted_tokens: int
    rejected: list[str]
    iterations: dict[str, list[tuple[float, float, int, int]]] = field(default_factory=dict)


class Simulator:
    """One simulation run. Use :func:`run_simulation` for the common case."""

    def __init__(self, trace: Trace, cluster: Sequence[InstanceSpec | InstanceProfile], config: SimConfig):
        self.trace = trace
        self.cfg = config
        specs = [c if isinstance(c, InstanceSpec) else InstanceSpec.single(f"i{k}", c)
                 for k, c in enumerate(cluster)]
        if not specs:
            raise ConfigError("cluster has no instances")
        if len({s.id for s in specs}) != len(specs):
            raise ConfigError("instance ids must be unique")
        self.insts = [_Instance(k, s) for k, s in enumerate(specs)]
        self.by_id = {i.id: i for i in self.insts}
        self.reqs = {r.id: _Req(r) for r in trace.requests}
        self.log = EventLog()
        self.now = 0.0
        self._heap: list[tuple[float, int, int, str, Any]] = []
        self._seq = 0
        self._admit_seq = 0
        self.violations: list[str] = []
        self.swaps = self.evictions = self.preemptions = self.plans = 0
        self.planned_transitions = 0
        self.solver_time = 0.0
        self.rejected: list[str] = []
        self.rr: dict[str, int] = {}
        # qlm state
        self.groups: dict[str, RequestGroup] = {}
        self.group_members: dict[str, list[_Req]] = {}
        self.group_next: dict[str, int] = {}  # FCFS pointer into members
        self.group_returned: dict[str, list[_Req]] = {}  # flushed, need fresh admission
        self.group_queue: dict[str, int] = {}
        self.ids = GroupIds()
        self.pending_plan: tuple[float, SchedulePlan] | None = None
        self.last_replan = -math.inf
        self.replan_scheduled: float | None = None
        self.history = config.history
        self.gcfg = config.grouping
        if config.policy == "qlm":
            if self.history is None:
                self.history = TokenHistory.from_requests(trace.requests) if len(trace) >= 2 else TokenHistory()
            if self.gcfg is None:
                self.gcfg = self._default_grouping()
        self.weight = config.violation_weight

    # ------------------------------------------------------------------ plumbing

    def _push(self, t: float, prio: int, kind: str, payload: Any = None) -> None:
        heapq.heappush(self._heap, (t, prio, self._seq, kind, payload))
        self._seq += 1

    def _wake(self, inst: _Instance, t: float | None = None) -> None:
        """Make sure the instance has a boundary event no later than ``t``."""
        if inst.failed:
            return
        t = self.now if t is None else t
        if inst.iter_end is not None:
            return  # boundary already pending at iteration end
        t = max(t, inst.busy_until)
        if inst.scheduled is not None and inst.scheduled <= t:
            return
        inst.scheduled = t
        self._push(t, 2, "boundary", (inst.idx, t))

    def _default_grouping(self) -> GroupingConfig:
        caps, foots = [], []
        for inst in self.insts:
            for p in inst.spec.profiles.values():
                caps.append(p.token_capacity)
        st = self.history.default if self.history is not None else None
        foot = st.mean_footprint if st is not None else 512.0
        return GroupingConfig(avg_batch_size=max(1.0, min(caps) / foot), seed=self.cfg.seed)

    def _alive(self) -> list[_Instance]:
        return [i for i in self.insts if not i.failed]

    # ------------------------------------------------------------------ main loop

    def run(self) -> SimResult:
        for r in self.trace.requests:
            self._push(r.arrival_time, 0, "arrival", r.id)
        for t, iid in self.cfg.failures:
            if iid not in self.by_id:
                raise ConfigError(f"failure injection names unknown instance {iid}")
            self._push(t, 1, "fail", iid)
        horizon = self.cfg.horizon
        while self._heap:
            t, prio, _, kind, payload = heapq.heappop(self._heap)
            if horizon is not None and t > horizon:
                break
            self.now = t
            if kind == "arrival":
                batch = [payload]
                while self._heap and self._heap[0][3] == "arrival" and self._heap[0][0] == t:
                    batch.append(heapq.heappop(self._heap)[4])
                self._on_arrivals(batch)
            elif kind == "boundary":
                idx, when = payload
                inst = self.insts[idx]
                if inst.failed or inst.scheduled != when:
                    continue
                inst.scheduled = None
                self._boundary(inst)
            elif kind == "replan":
                if self.replan_scheduled == t:
                    self.replan_scheduled = None
                    self._replan(force=False)
            elif kind == "apply":
                self._apply_pending()
            elif kind == "note":
                self.log.append(t, payload[0], **payload[1])
            elif kind == "fail":
                self._fail(self.by_id[payload])
        self._finish_checks(horizon)
        return self._result()

    # ------------------------------------------------------------------ arrivals

    def _fits_somewhere(self, r: Request) -> bool:
        for inst in self.insts:
            p = inst.spec.profiles.get(r.model)
            if p is not None and r.input_tokens + r.output_tokens <= p.token_capacity \
                    and r.output_tokens <= p.max_output_tokens:
                return True
        return False

    def _on_arrivals(self, ids: list[str]) -> None:
        accepted: list[_Req] = []
        for rid in ids:
            q = self.reqs[rid]
            self.log.append(self.now, "arrival", request=rid, model=q.r.model)
            if not self._fits_somewhere(q.r):
                q.state = "rejected"
                self.rejected.append(rid)
                self.log.append(self.now, "reject", request=rid, reason="exceeds every instance capacity")
                continue
            accepted.append(q)
        if not accepted:
            return
        if self.cfg.policy == "qlm":
            self._qlm_arrivals(accepted)
        else:
            for q in accepted:
                self._dispatch_baseline(q)

    def _eligible(self, model: str) -> list[_Instance]:
        return [i for i in self._alive() if model in i.spec.profiles]

    def _dispatch_baseline(self, q: _Req) -> None:
        elig = self._eligible(q.r.model)
        if not elig:
            q.state = "rejected"
            self.rejected.append(q.r.id)
            self.log.append(self.now, "reject", request=q.r.id, reason="no live instance for model")
            return
        k = self.rr.get(q.r.model, 0)
        self.rr[q.r.model] = k + 1
        inst = elig[k % len(elig)]
        key = fcfs_key(q.r) if self.cfg.policy == "fcfs" else edf_key(q.r)
        bisect.insort(inst.queue, (key, q), key=lambda e: e[0])
        q.state = "queued"
        q.inst = inst.idx
        prof = inst.spec.profiles[q.r.model]
        self.log.append(self.now, "queued", request=q.r.id, instance=inst.id)
        self._wake(inst)

    # ------------------------------------------------------------------ qlm: grouping and placement

    def _qlm_arrivals(self, arrivals: list[_Req]) -> None:
        unmatched: list[_Req] = []
        touched: list[str] = []
        for q in arrivals:
            gid = find_group(q.r, self.groups, self.gcfg, self.history)
            if gid is None:
                unmatched.append(q)
                continue
            assign_incoming(q.r, self.groups, self.gcfg, self.history, self.ids, now=self.now)
            self._attach(q, gid)
            touched.append(gid)
        new_groups: list[RequestGroup] = []
        if len(unmatched) == 1:
            gid = assign_incoming(unmatched[0].r, self.groups, self.gcfg, self.history, self.ids, now=self.now)
            new_groups.append(self.groups[gid])
        elif unmatched:
            for g in form_request_groups([q.r for q in unmatched], self.gcfg, self.history, self.ids,
                                         now=self.now):
                self.groups[g.id] = g
                new_groups.append(g)
        for g in new_groups:
            self.group_members[g.id] = []
            self.group_next[g.id] = 0
            self.group_returned[g.id] = []
            for rid in g.members:
                self._attach(self.reqs[rid], g.id, new=True)
            self.log.append(self.now, "group-formed", group=g.id, model=g.model, size=len(g.members),
                            slo=g.slo)
            self._place_group(g)
        for q in arrivals:
            if q.group is not None:
                inst = self.insts[self.group_queue[q.group]]
                q.est_wait = self._estimate_request_wait(inst, q)
                self.log.append(self.now, "queued", request=q.r.id, group=q.group, instance=inst.id,
                                est_wait=q.est_wait)
                self._wake(inst)
        self._check_violations()

    def _attach(self, q: _Req, gid: str, new: bool = False) -> None:
        q.group = gid
        q.state = "queued"
        self.group_members.setdefault(gid, []).append(q)

    def _group_profile(self, inst: _Instance, g: RequestGroup) -> InstanceProfile:
        return inst.spec.profile(g.model)

    def _remaining(self, gid: str) -> int:
        return sum(1 for q in self.group_members[gid] if q.state != "done")

    def _estimate(self, inst: _Instance, g: RequestGroup):
        n = max(1, self._remaining(g.id))
        return estimate_group_completion(n, g.stats, self._group_profile(inst, g))

    def _swap_cost(self, inst: _Instance, model: str) -> float:
        p = inst.spec.profile(model)
        ready = inst.warm.get(model)
        if ready is not None:
            return p.swap_warm + max(0.0, ready - self.now)
        return p.swap_cold + p.swap_warm

    def _effective_resident(self, inst: _Instance) -> str | None:
        return inst.swap_target if inst.swap_target is not None else inst.resident

    def _queue_waits(self, inst: _Instance, gids: Sequence[str]) -> list[float]:
        gs = [self.groups[g] for g in gids]
        ests = [self._estimate(inst, g) for g in gs]
        return compose_waits(
            [e.serve_time for e in ests],
            [e.completion_time for e in ests],
            [g.model for g in gs],
            lambda m: self._swap_cost(inst, m),
            self._effective_resident(inst),
        )

    def _place_group(self, g: RequestGroup) -> None:
        best = None
        for inst in self._alive():
            if g.model not in inst.spec.profiles:
                continue
            w = self._queue_waits(inst, inst.groups + [g.id])[-1]
            key = (w, inst.idx)
            if best is None or key < best[0]:
                best = (key, inst)
        if best is None:
            raise ConfigError(f"no live instance can serve model {g.model}")
        inst = best[1]
        inst.groups.append(g.id)
        self.group_queue[g.id] = inst.idx
        self._update_warm(inst)

    def _estimate_request_wait(self, inst: _Instance, q: _Req) -> float:
        """Requests ahead (all groups in front plus earlier members) times mu_o / theta."""
        g = self.groups[q.group]
        prof = self._group_profile(inst, g)
        ahead = 0
        for gid in inst.groups:
            if gid == q.group:
                break
            ahead += self._remaining(gid)
        for m in self.group_members[q.group]:
            if m is q:
                break
            if m.state != "done":
                ahead += 1
        return ahead * g.stats.mean_output / prof.theta

    def _slack_budget(self, gid: str) -> float:
        g = self.groups[gid]
        oldest = None
        for q in self.group_members[gid]:
            if q.first_token is None and q.state != "done":
                oldest = q.r.arrival_time if oldest is None else min(oldest, q.r.arrival_time)
        if oldest is None:
            return _NO_SLACK_LIMIT
        return g.slo - (self.now - oldest)

    def _check_violations(self) -> None:
        queues = {inst.id: [self.groups[g] for g in inst.groups] for inst in self._alive()}
        ests = {}
        swaps = {}
        for inst in self._alive():
            swaps[inst.id] = {m: self._swap_cost(inst, m) for m in inst.spec.profiles}
            for gid in inst.groups:
                ests[(gid, inst.id)] = self._estimate(inst, self.groups[gid])
        budget = {gid: self._slack_budget(gid) for gs in queues.values() for gid in (g.id for g in gs)}
        reports = detect_slo_violation(
            queues, ests, swaps, {i.id: self._effective_resident(i) for i in self._alive()}, budget
        )
        if reports:
            self._request_replan()

    def _request_replan(self) -> None:
        earliest = self.last_replan + self.cfg.replan_interval
        if self.now >= earliest:
            self._replan(force=False)
        elif self.replan_scheduled is None:
            self.replan_scheduled = earliest
            self._push(earliest, 1, "replan")

    # ------------------------------------------------------------------ qlm: global scheduler

    def _replan(self, force: bool) -> None:
        live = [g for g in self.groups.values() if g.state is not GroupState.COMPLETE]
        alive = self._alive()
        if not live or not alive:
            return
        self.last_replan = self.now
        queues = [i.id for i in alive]
        ests, swaps, pinned = {}, {}, {}
        for inst in alive:
            swaps[inst.id] = {m: self._swap_cost(inst, m) for m in inst.spec.profiles}
            for g in live:
                if g.model in inst.spec.profiles:
                    ests[(g.id, inst.id)] = self._estimate(inst, g)
                else:
                    ests[(g.id, inst.id)] = _UNSERVABLE
        for g in live:
            if g.state is GroupState.RUNNING:
                pinned[g.id] = self.insts[self.group_queue[g.id]].id
        for inst in alive:
            # a swap already under way commits its group to this instance
            if inst.swap_group is not None and inst.swap_group in self.groups:
                if self.groups[inst.swap_group].state is not GroupState.COMPLETE:
                    pinned[inst.swap_group] = inst.id
        budget = {g.id: self._slack_budget(g.id) for g in live}
        kw = {}
        if self.weight is not None:
            kw["violation_weight"] = self.weight
        problem = build_problem(
            live, queues, ests, swaps,
            {i.id: self._effective_resident(i) for i in alive},
            pinned=pinned, slack_budget=budget, **kw,
        )
        t0 = time.perf_counter()
        if len(live) <= self.cfg.exact_groups:
            plan = solve_exact(problem, budget=self.cfg.solver_budget)
        else:
            plan = solve_heuristic(problem, budget=self.cfg.solver_budget)
        self.solver_time += time.perf_counter() - t0
        self.plans += 1
        self.planned_transitions += plan.transitions(problem)
        at = self.now + self.cfg.solve_latency
        self.log.append(self.now, "plan-solved", objective=round(plan.objective, 9), solver=plan.solver,
                        groups=len(live), feasible=plan.feasible)
        self.pending_plan = (at, plan)
        if at <= self.now:
            self._apply_pending()
        else:
            self._push(at, 1, "apply")

    def _apply_pending(self) -> None:
        if self.pending_plan is None or self.pending_plan[0] > self.now:
            return
        _, plan = self.pending_plan
        self.pending_plan = None
        try:
            self.apply_plan(plan)
        except StalePlanError as e:
            self.log.append(self.now, "plan-stale", reason=str(e))

    def apply_plan(self, plan: SchedulePlan) -> None:
        """Rewrite every virtual queue from ``plan``.

        Groups created after the plan was solved keep their current queue
        (appended at the tail). Running groups never change instance.
        """
        for qid, gids in plan.queues.items():
            if qid not in self.by_id or self.by_id[qid].failed:
                raise StalePlanError(f"plan references unavailable instance {qid}")
            for gid in gids:
                g = self.groups.get(gid)
                if g is None or g.state is GroupState.COMPLETE:
                    raise StalePlanError(f"plan references completed group {gid}")
                if g.state is GroupState.RUNNING and self.group_queue[gid] != self.by_id[qid].idx:
                    raise StalePlanError(f"plan migrates running group {gid}")
        planned = {gid for gids in plan.queues.values() for gid in gids}
        changed = False
        for inst in self._alive():
            new = list(plan.queues.get(inst.id, []))
            new += [g for g in inst.groups if g not in planned]
            resident = self._effective_resident(inst)
            running = [g for g in new if self.groups[g].model == resident
                       and (self.groups[g].state is GroupState.RUNNING or g == inst.swap_group)]
            if running and self.groups[new[0]].model != resident:
                # a running group may be overtaken by its own model only; anything
                # else would flush its batch
                new = running + [g for g in new if g not in running]
            if new != inst.groups:
                changed = True
                old_head = inst.groups[0] if inst.groups else None
                inst.groups = new
                for gid in new:
                    self.group_queue[gid] = inst.idx
                if (new[0] if new else None) != old_head:
                    inst.head_changed_by_plan = True
                self._update_warm(inst)
                self._wake(inst)
        if changed:
            self.log.append(self.now, "plan-applied",
                            queues={k: list(v) for k, v in sorted(plan.queues.items())})

    # ------------------------------------------------------------------ warm tier

    def _lookahead_models(self, inst: _Instance) -> list[str]:
        seen: list[str] = []
        if self.cfg.policy == "qlm":
            models = (self.groups[g].model for g in inst.groups)
        else:
            models = (q.r.model for _, q in inst.queue)
        target = self._effective_resident(inst)
        for m in models:
            if m != target and m not in seen:
                seen.append(m)
                if len(seen) >= inst.spec.warm_slots:
                    break
        return seen

    def _update_warm(self, inst: _Instance) -> None:
        if not self.cfg.warm_prefetch or inst.spec.warm_slots == 0:
            inst.warm.clear()
            return
        want = self._lookahead_models(inst)
        for m in list(inst.warm):
            if m not in want:
                del inst.warm[m]
        for m in want:
            if m not in inst.warm:
                inst.warm[m] = self.now + inst.spec.profile(m).swap_cold
                self.log.append(self.now, "prefetch", instance=inst.id, model=m)

    # ------------------------------------------------------------------ instance stepping

    def _boundary(self, inst: _Instance) -> None:
        t = self.now
        if inst.iter_end is not None and inst.iter_end <= t:
            self._finish_iteration(inst)
        if inst.swap_target is not None and inst.busy_until <= t:
            inst.resident = inst.swap_target
            inst.swap_target = None
            inst.swap_group = None
            inst.warm.pop(inst.resident, None)
            self.log.append(t, "swap-done", instance=inst.id, model=inst.resident)
            self._update_warm(inst)
        if inst.swap_target is not None:
            self._wake(inst, inst.busy_until)
            return
        if self.cfg.policy == "qlm":
            self._qlm_actuate(inst)
        else:
            self._baseline_actuate(inst)
        if inst.swap_target is not None:
            self._wake(inst, inst.busy_until)
            return
        self._start_iteration(inst)

    def _finish_iteration(self, inst: _Instance) -> None:
        t = inst.iter_end
        inst.iter_end = None
        for q in inst.participants:
            if q.state != "running" or q.inst != inst.idx:
                continue
            q.generated += 1
            q.footprint += 1
            q.work += 1
            inst.tokens += 1
            if q.fresh:
                q.fresh = False
                if q.first_token is None:
                    q.first_token = t
                    self.log.append(t, "first-token", request=q.r.id, group=q.group, instance=inst.id)
            if q.generated >= q.r.output_tokens:
                if q.generated != q.r.output_tokens:
                    self.violations.append(f"token exactness: {q.r.id} generated {q.generated}")
                self._complete(inst, q)
        inst.participants = []

    def _complete(self, inst: _Instance, q: _Req) -> None:
        q.state = "done"
        q.done_at = self.now
        q.footprint = 0
        inst.running.remove(q)
        self.log.append(self.now, "completion", request=q.r.id, group=q.group, instance=inst.id)
        if q.group is not None:
            gid = q.group
            if all(m.state == "done" for m in self.group_members[gid]):
                g = self.groups[gid]
                g.state = GroupState.COMPLETE
                qi = self.insts[self.group_queue[gid]]
                if gid in qi.groups:
                    qi.groups.remove(gid)
                self.log.append(self.now, "group-complete", group=gid, instance=qi.id)
                self._update_warm(qi)

    def _capacity(self, inst: _Instance) -> int:
        return inst.profile.token_capacity if inst.resident is not None else 0

    def _preempt_for_growth(self, inst: _Instance) -> None:
        cap = self._capacity(inst)
        used = inst.used_next()
        while used > cap and inst.running:
            victim = max(inst.running, key=lambda q: q.admit_seq)
            used -= victim.footprint + (1 if victim.state == "running" else 0)
            self._to_host(inst, victim, kind="preemption")
            self.preemptions += 1

    def _to_host(self, inst: _Instance, q: _Req, kind: str) -> None:
        inst.running.remove(q)
        bw = inst.profile.kv_transfer_bandwidth
        q.evict_done = max(self.now, q.ready_at if q.state == "restoring" else self.now) + q.footprint / bw
        q.state = "held"
        inst.held.append(q)
        self.log.append(self.now, kind, request=q.r.id, group=q.group, instance=inst.id,
                        tokens=q.footprint, done_at=q.evict_done)
        self._push(q.evict_done, 1, "note", ("evict-done", {"request": q.r.id, "instance": inst.id}))

    def _flush(self, inst: _Instance) -> None:
        for q in list(inst.running):
            inst.running.remove(q)
            q.state = "queued"
            q.generated = 0
            q.footprint = 0
            q.fresh = False
            self.log.append(self.now, "flush", request=q.r.id, group=q.group, instance=inst.id)
            if self.cfg.policy == "qlm":
                lst = self.group_returned[q.group]
                bisect.insort(lst, q, key=lambda x: (x.r.arrival_time, x.r.id))
            else:
                key = fcfs_key(q.r) if self.cfg.policy == "fcfs" else edf_key(q.r)
                bisect.insort(inst.queue, (key, q), key=lambda e: e[0])

    def _begin_swap(self, inst: _Instance, target: str, group: str | None = None) -> None:
        if target == inst.resident:
            return
        if target not in inst.spec.profiles:
            raise ConfigError(f"model {target} not in registry of instance {inst.id}")
        if inst.running:
            self._flush(inst)
        cost = self._swap_cost(inst, target)
        old = inst.resident
        inst.swap_target = target
        inst.swap_group = group
        inst.busy_until = self.now + cost
        inst.busy_time += cost
        self.swaps += 1
        self.log.append(self.now, "swap-start", instance=inst.id, model=target, previous=old,
                        duration=cost, warm=target in inst.warm, group=group)
        inst.warm.pop(target, None)
        if old is not None and self.cfg.warm_prefetch and old in self._lookahead_models(inst):
            inst.warm[old] = self.now  # weights copied back to host as they are swapped out
        self._update_warm(inst)

    def _admit(self, inst: _Instance, q: _Req) -> None:
        q.admit_seq = self._admit_seq
        self._admit_seq += 1
        q.inst = inst.idx
        if q.state == "held":
            inst.held.remove(q)
            bw = inst.profile.kv_transfer_bandwidth
            q.ready_at = max(self.now, q.evict_done) + q.footprint / bw
            q.state = "restoring" if q.ready_at > self.now else "running"
            self.log.append(self.now, "restore", request=q.r.id, group=q.group, instance=inst.id,
                            ready_at=q.ready_at)
        else:
            q.state = "running"
            q.fresh = True
            q.footprint = q.r.input_tokens
            q.generated = 0
            if q.admitted_at is None:
                q.admitted_at = self.now
            self.log.append(self.now, "pull", request=q.r.id, group=q.group, instance=inst.id)
        inst.running.append(q)

    def _try_admit(self, inst: _Instance, candidates: Iterable[_Req]) -> None:
        cap = self._capacity(inst)
        used = inst.used_next()
        for q in candidates:
            need = q.footprint if q.state == "held" else q.r.input_tokens + 1
            if used + need > cap:
                return
            used += need
            self._admit(inst, q)

    # -- qlm agent

    def _qlm_candidates(self, inst: _Instance) -> Iterator[_Req]:
        if not self.cfg.eviction:
            # without the eviction actuator, preempted work resumes first
            for q in sorted(inst.held, key=lambda x: x.admit_seq):
                yield q
                if q.state == "held":
                    return
        for gid in list(inst.groups):
            g = self.groups[gid]
            if g.model != inst.resident:
                return
            for q in sorted((h for h in inst.held if h.group == gid),
                            key=lambda x: (x.r.arrival_time, x.r.id)):
                yield q
            returned = self.group_returned[gid]
            members = self.group_members[gid]
            while returned or self.group_next[gid] < len(members):
                nxt = members[self.group_next[gid]] if self.group_next[gid] < len(members) else None
                if returned and (nxt is None or (returned[0].r.arrival_time, returned[0].r.id)
                                 < (nxt.r.arrival_time, nxt.r.id)):
                    q = returned[0]
                    if q.state != "queued":
                        returned.pop(0)
                        continue
                    yield q
                    if q.state != "queued":
                        returned.pop(0)
                    else:
                        return
                else:
                    if nxt.state != "queued":
                        self.group_next[gid] += 1
                        continue
                    yield nxt
                    if nxt.state != "queued":
                        self.group_next[gid] += 1
                        if g.state is GroupState.WAITING:
                            g.state = GroupState.RUNNING
                    else:
                        return

    def _qlm_actuate(self, inst: _Instance) -> None:
        if inst.head_changed_by_plan:
            inst.head_changed_by_plan = False
            head = self.groups[inst.groups[0]] if inst.groups else None
            if head is not None and head.model == inst.resident and self.cfg.eviction:
                victims = [q for q in inst.running if q.group != head.id]
                for q in sorted(victims, key=lambda q: q.admit_seq):
                    self._to_host(inst, q, kind="evict-start")
                    self.evictions += 1
        if inst.groups:
            head = self.groups[inst.groups[0]]
            if head.model != inst.resident:
                self._begin_swap(inst, head.model, group=head.id)
                return
        self._preempt_for_growth(inst)
        self._try_admit(inst, self._qlm_candidates(inst))
        self._check_capacity(inst)

    # -- baseline agent

    def _baseline_candidates(self, inst: _Instance) -> Iterator[_Req]:
        for q in sorted(inst.held, key=lambda x: x.admit_seq):
            yield q
        while inst.queue:
            q = inst.queue[0][1]
            if q.r.model != inst.resident:
                return
            yield q
            if q.state == "queued":
                return
            inst.queue.pop(0)

    def _batch_candidates(self, inst: _Instance) -> Iterator[_Req]:
        for q in sorted(inst.held, key=lambda x: x.admit_seq):
            yield q
        for q in inst.batch or ():
            if q.state == "queued":
                yield q
                if q.state == "queued":
                    return

    def _baseline_actuate(self, inst: _Instance) -> None:
        if self.cfg.policy == "static":
            self._static_actuate(inst)
            return
        if inst.queue and inst.queue[0][1].r.model != inst.resident:
            if not inst.running and not inst.held:
                self._begin_swap(inst, inst.queue[0][1].r.model)
                return
        self._preempt_for_growth(inst)
        self._try_admit(inst, self._baseline_candidates(inst))
        self._check_capacity(inst)

    def _static_actuate(self, inst: _Instance) -> None:
        if inst.batch is not None:
            if all(q.state == "done" for q in inst.batch) and self.now >= inst.batch_end:
                inst.batch = None
            elif all(q.state == "done" for q in inst.batch):
                self._wake(inst, inst.batch_end)
                return
        if inst.batch is None and inst.queue:
            head = inst.queue[0][1]
            if head.r.model != inst.resident:
                self._begin_swap(inst, head.r.model)
                return
            size = self.cfg.static_batch_size or max(
                1, int(inst.profile.token_capacity // max(1.0, self._mean_footprint())))
            batch, rest = [], []
            for e in inst.queue:
                if len(batch) < size and e[1].r.model == head.r.model:
                    batch.append(e[1])
                else:
                    rest.append(e)
            inst.queue = rest
            inst.batch = batch
            inst.batch_end = self.now + static_batch_duration(inst.profile)
            self.log.append(self.now, "batch-start", instance=inst.id, size=len(batch),
                            until=inst.batch_end)
        if inst.batch is None:
            return
        self._preempt_for_growth(inst)
        self._try_admit(inst, self._batch_candidates(inst))
        self._check_capacity(inst)

    def _mean_footprint(self) -> float:
        if not hasattr(self, "_mf"):
            h = self.history or (TokenHistory.from_requests(self.trace.requests) if len(self.trace) >= 2 else None)
            self._mf = h.default.mean_footprint if h is not None and h.default is not None else 512.0
        return self._mf

    def _check_capacity(self, inst: _Instance) -> None:
        if inst.resident is None:
            return
        used = sum(q.footprint for q in inst.running)
        if used > self._capacity(inst):
            self.violations.append(f"capacity exceeded on {inst.id} at t={self.now}: {used}")

    def _start_iteration(self, inst: _Instance) -> None:
        ready = []
        next_ready = math.inf
        for q in inst.running:
            if q.state == "restoring":
                if q.ready_at <= self.now + 1e-12:
                    q.state = "running"
                else:
                    next_ready = min(next_ready, q.ready_at)
                    continue
            ready.append(q)
        if ready:
            cap = self._capacity(inst)
            if sum(q.footprint + 1 for q in ready) + sum(q.footprint for q in inst.running if q.state == "restoring") > cap:
                self._preempt_for_growth(inst)
                ready = [q for q in inst.running if q.state == "running"]
        if not ready:
            if next_ready < math.inf:
                self._wake(inst, next_ready)
            elif self.cfg.policy == "static" and inst.batch is not None:
                self._wake(inst, max(self.now, inst.batch_end))
            return
        prof = inst.profile
        dur = prof.decode_per_token + (prof.prefill if any(q.fresh for q in ready) else 0.0)
        inst.participants = ready
        inst.iter_end = self.now + dur
        inst.busy_time += dur
        if self.cfg.record_iterations:
            inst.iterations.append((self.now, dur, len(ready), len(inst.running) + len(inst.held)))
        self._push(inst.iter_end, 2, "boundary", (inst.idx, inst.iter_end))
        inst.scheduled = inst.iter_end

    # ------------------------------------------------------------------ direct actuator access

    def _events_since(self, n: int) -> list[dict[str, Any]]:
        return self.log.records[n:]

    def step_instance(self, instance: str) -> list[dict[str, Any]]:
        """Finish the pending iteration (if due) and start the next one."""
        n = len(self.log)
        inst = self.by_id[instance]
        if inst.iter_end is not None:
            self.now = max(self.now, inst.iter_end)
        inst.scheduled = None
        self._boundary(inst)
        return self._events_since(n)

    def lso_pull(self, instance: str) -> list[dict[str, Any]]:
        n = len(self.log)
        inst = self.by_id[instance]
        if self.cfg.policy == "qlm":
            self._try_admit(inst, self._qlm_candidates(inst))
        else:
            self._try_admit(inst, self._baseline_candidates(inst))
        return self._events_since(n)

    def lso_evict(self, instance: str, new_head: str) -> list[dict[str, Any]]:
        n = len(self.log)
        inst = self.by_id[instance]
        for q in sorted([q for q in inst.running if q.group != new_head], key=lambda q: q.admit_seq):
            self._to_host(inst, q, kind="evict-start")
            self.evictions += 1
        return self._events_since(n)

    def lso_swap_model(self, instance: str, target: str) -> list[dict[str, Any]]:
        n = len(self.log)
        self._begin_swap(self.by_id[instance], target)
        return self._events_since(n)

    # ------------------------------------------------------------------ failures

    def _fail(self, inst: _Instance) -> None:
        if inst.failed:
            return
        inst.failed = True
        inst.iter_end = None
        inst.scheduled = None
        self.log.append(self.now, "instance-failed", instance=inst.id)
        lost = list(inst.running) + list(inst.held)
        inst.running.clear()
        inst.held.clear()
        inst.participants = []
        for q in lost:
            q.state = "queued"
            q.generated = 0
            q.footprint = 0
            q.fresh = False
            q.inst = -1
        if not self._alive():
            return
        if self.cfg.policy == "qlm":
            for q in lost:
                bisect.insort(self.group_returned[q.group], q, key=lambda x: (x.r.arrival_time, x.r.id))
            orphans = list(inst.groups)
            inst.groups = []
            for gid in orphans:
                g = self.groups[gid]
                if g.state is GroupState.RUNNING:
                    g.state = GroupState.WAITING
                self._place_group(g)
            self._replan(force=True)
            for other in self._alive():
                self._wake(other)
        else:
            pending = [q for _, q in inst.queue] + lost + [q for q in (inst.batch or []) if q.state == "queued"]
            inst.queue = []
            inst.batch = None
            for q in sorted(set(pending), key=lambda q: (q.r.arrival_time, q.r.id)):
                self._dispatch_baseline(q)

    # ------------------------------------------------------------------ results

    def _finish_checks(self, horizon: float | None) -> None:
        states: dict[str, int] = {}
        for q in self.reqs.values():
            states[q.state] = states.get(q.state, 0) + 1
            if q.state == "done" and q.generated != q.r.output_tokens:
                self.violations.append(f"token exactness: {q.r.id}")
        if horizon is None:
            unfinished = [rid for rid, q in self.reqs.items() if q.state not in ("done", "rejected")]
            if unfinished and self._alive():
                self.violations.append(f"conservation: {len(unfinished)} requests never completed")

    def _result(self) -> SimResult:
        return SimResult(
            log=self.log,
            trace=self.trace,
            config=self.cfg,
            first_token={rid: q.first_token for rid, q in self.reqs.items() if q.first_token is not None},
            completion={rid: q.done_at for rid, q in self.reqs.items() if q.done_at is not None},
            admitted={rid: q.admitted_at for rid, q in self.reqs.items() if q.admitted_at is not None},
            est_wait={rid: q.est_wait for rid, q in self.reqs.items() if q.est_wait is not None},
            violations=self.violations,
            swaps=self.swaps,
            evictions=self.evictions,
            preemptions=self.preemptions,
            plans=self.plans,
            planned_transitions=self.planned_transitions,
            solver_time=self.solver_time,
            busy_time={i.id: i.busy_time for i in self.insts},
            wasted_tokens=sum(q.work - q.generated for q in self.reqs.values()),
            rejected=self.rejected,
            iterations={i.id: i.iterations for i in self.insts} if self.cfg.record_iterations else {},
        )


class StalePlanError(RuntimeError):
    pass


class _Unservable:
    serve_time = 1e7
    completion_time = 1e7


_UNSERVABLE = _Unservable()


def run_simulation(
    trace: Trace,
    cluster: Sequence[InstanceSpec | InstanceProfile],
    policy: str = "qlm",
    seed: int = 0,
    **kw: Any,
) -> SimResult:
    """Simulate ``trace`` on ``cluster`` under ``policy``; deterministic given the inputs."""
    cfg = SimConfig(policy=policy, seed=seed, **kw)
    return Simulator(trace, cluster, cfg).run()
