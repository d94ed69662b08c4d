"""Assignment of request groups to virtual-queue slots.

Each queue ``g`` has ``L`` slots. Group ``i`` placed in a slot gets a
predicted wait ``wt`` (see :func:`vqserve.estimator.compose_waits`) and a
penalty ``p = wt - slo_i``. Solvers minimise

    objective = sum(p) + violation_weight * sum(max(p, 0))

over all bijections between groups (plus empty padding) and slots. With the
weight at zero this is the plain penalty sum; the default weight makes an SLO
violation cost far more than the same amount of slack gained elsewhere, so a
plan that meets every SLO is preferred whenever one exists. Empty slots have
zero penalty and never cause a model transition.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .core import ConfigError
from .estimator import GroupCompletionEstimate, compose_waits

DEFAULT_VIOLATION_WEIGHT = 100.0
_EPS = 1e-9


class PlanValidationError(ValueError):
    pass


@dataclass
class AssignmentProblem:
    """Inputs of one scheduling round.

    ``serve[q][i]`` / ``completion[q][i]`` are the group's serve and completion
    estimates on queue ``q`` (queues may sit on different GPU types).
    ``swap[q][m]`` is the cost of loading model ``models[m]`` on queue ``q``
    and ``resident[q]`` the model index loaded at solve time (-1 for none).
    ``pinned`` maps a group index to the only queue it may use.
    """

    queues: list[str]
    groups: list[str]
    models: list[str]
    group_model: list[int]
    slo: list[float]
    serve: np.ndarray
    completion: np.ndarray
    swap: np.ndarray
    resident: list[int]
    length: int
    pinned: dict[int, int] = field(default_factory=dict)
    violation_weight: float = DEFAULT_VIOLATION_WEIGHT

    def __post_init__(self) -> None:
        self.serve = np.asarray(self.serve, float).reshape(len(self.queues), len(self.groups))
        self.completion = np.asarray(self.completion, float).reshape(len(self.queues), len(self.groups))
        self.swap = np.asarray(self.swap, float).reshape(len(self.queues), len(self.models))
        if len(self.group_model) != len(self.groups) or len(self.slo) != len(self.groups):
            raise ConfigError("group arrays have inconsistent lengths")
        if len(self.resident) != len(self.queues):
            raise ConfigError("resident list must have one entry per queue")
        if self.n_slots < len(self.groups):
            raise ConfigError(f"{len(self.groups)} groups do not fit in {self.n_slots} slots")
        if np.any(self.serve < 0) or np.any(self.completion < 0) or np.any(self.swap < 0):
            raise ConfigError("estimates must be >= 0")
        if np.any(self.completion + 1e-12 < self.serve):
            raise ConfigError("completion estimates must be >= serve estimates")
        per_queue: dict[int, int] = {}
        for i, q in self.pinned.items():
            per_queue[q] = per_queue.get(q, 0) + 1
        if any(c > self.length for c in per_queue.values()):
            raise ConfigError("more groups pinned to a queue than it has slots")

    @property
    def n_slots(self) -> int:
        return len(self.queues) * self.length

    @property
    def n_padding(self) -> int:
        return self.n_slots - len(self.groups)

    def allowed(self, i: int, q: int) -> bool:
        p = self.pinned.get(i)
        return p is None or p == q

    def to_json(self) -> str:
        return json.dumps(
            {
                "queues": self.queues,
                "groups": self.groups,
                "models": self.models,
                "group_model": self.group_model,
                "slo": self.slo,
                "serve": self.serve.tolist(),
                "completion": self.completion.tolist(),
                "swap": self.swap.tolist(),
                "resident": self.resident,
                "length": self.length,
                "pinned": {str(k): v for k, v in self.pinned.items()},
                "violation_weight": self.violation_weight,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, s: str) -> AssignmentProblem:
        d = json.loads(s)
        d["pinned"] = {int(k): v for k, v in d["pinned"].items()}
        return cls(**d)


@dataclass
class SchedulePlan:
    queues: dict[str, list[str]]
    predicted_wait: dict[str, list[float]]
    penalties: dict[str, list[float]]
    objective: float
    total_penalty: float
    violation: float
    length: int
    optimal: bool = True
    solver: str = ""
    wall_time: float = 0.0

    @property
    def feasible(self) -> bool:
        return all(p <= _EPS for ps in self.penalties.values() for p in ps)

    @property
    def assignment(self) -> dict[tuple[str, int], str | None]:
        """(queue, position) -> group id, with ``None`` for padding slots."""
        out: dict[tuple[str, int], str | None] = {}
        for q, seq in self.queues.items():
            for j in range(self.length):
                out[(q, j)] = seq[j] if j < len(seq) else None
        return out

    def transitions(self, problem: AssignmentProblem) -> int:
        n = 0
        gidx = {g: i for i, g in enumerate(problem.groups)}
        for qi, q in enumerate(problem.queues):
            prev = problem.resident[qi]
            for gid in self.queues.get(q, []):
                m = problem.group_model[gidx[gid]]
                n += m != prev
                prev = m
        return n

    def to_json(self) -> str:
        return json.dumps(
            {
                "queues": self.queues,
                "predicted_wait": self.predicted_wait,
                "penalties": self.penalties,
                "objective": self.objective,
                "total_penalty": self.total_penalty,
                "violation": self.violation,
                "length": self.length,
                "optimal": self.optimal,
                "solver": self.solver,
                "feasible": self.feasible,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, s: str) -> SchedulePlan:
        d = json.loads(s)
        d.pop("feasible", None)
        return cls(**d)


def build_problem(
    groups: Sequence[Any],
    queues: Sequence[str],
    estimates: Mapping[tuple[str, str], GroupCompletionEstimate],
    swap_times: Mapping[str, Mapping[str, float]],
    resident_models: Mapping[str, str | None],
    pinned: Mapping[str, str] | None = None,
    slack_budget: Mapping[str, float] | None = None,
    length: int | None = None,
    violation_weight: float = DEFAULT_VIOLATION_WEIGHT,
) -> AssignmentProblem:
    """Assemble an :class:`AssignmentProblem`.

    ``groups`` are objects with ``id``, ``model`` and ``slo`` (and optionally
    ``sort_key``); they are ordered by ``sort_key`` for deterministic
    tie-breaking. ``slack_budget`` replaces a group's SLO by its remaining
    budget. ``pinned`` keeps groups that already started on the given queue.
    """
    groups = sorted(groups, key=lambda g: getattr(g, "sort_key", (0.0, g.id)))
    queues = list(queues)
    if not queues:
        raise ConfigError("no virtual queues")
    models = sorted({g.model for g in groups} | {m for q in queues for m in swap_times.get(q, {})})
    midx = {m: k for k, m in enumerate(models)}
    nq, ng = len(queues), len(groups)
    serve = np.zeros((nq, ng))
    comp = np.zeros((nq, ng))
    for qi, q in enumerate(queues):
        for gi, g in enumerate(groups):
            est = estimates.get((g.id, q))
            if est is None:
                raise ConfigError(f"missing estimate for group {g.id} on queue {q}")
            serve[qi, gi] = est.serve_time
            comp[qi, gi] = est.completion_time
    swap = np.zeros((nq, len(models)))
    for qi, q in enumerate(queues):
        for m, k in midx.items():
            if m not in swap_times.get(q, {}):
                if any(g.model == m for g in groups):
                    raise ConfigError(f"missing swap time for model {m} on queue {q}")
                continue
            swap[qi, k] = swap_times[q][m]
    resident = [midx.get(resident_models.get(q), -1) if resident_models.get(q) is not None else -1
                for q in queues]
    gpos = {g.id: i for i, g in enumerate(groups)}
    qpos = {q: i for i, q in enumerate(queues)}
    pins = {gpos[g]: qpos[q] for g, q in (pinned or {}).items() if g in gpos}
    if length is None:
        length = math.ceil(ng / nq) + 2
        if pins:
            counts = np.bincount(list(pins.values()), minlength=nq)
            length = max(length, int(counts.max()) + 1)
    budget = slack_budget or {}
    return AssignmentProblem(
        queues=queues,
        groups=[g.id for g in groups],
        models=models,
        group_model=[midx[g.model] for g in groups],
        slo=[float(budget.get(g.id, g.slo)) for g in groups],
        serve=serve,
        completion=comp,
        swap=swap,
        resident=resident,
        length=length,
        pinned=pins,
        violation_weight=violation_weight,
    )


# --------------------------------------------------------------------------- evaluation


def _slot_cost(p: float, w: float) -> float:
    return p + w * p if p > 0 else p


def _queue_eval(problem: AssignmentProblem, q: int, seq: Sequence[int]) -> tuple[float, list[float], list[float]]:
    """Cost, waits and penalties of one queue's group sequence (fast path)."""
    serve, comp, swap = problem.serve[q], problem.completion[q], problem.swap[q]
    gm, slo, w = problem.group_model, problem.slo, problem.violation_weight
    acc = 0.0
    prev_m = problem.resident[q]
    prev_i = -1
    cost = 0.0
    waits, pens = [], []
    for i in seq:
        m = gm[i]
        if m != prev_m:
            if prev_i >= 0:
                acc += comp[prev_i]
            acc += swap[m]
        elif prev_i >= 0:
            acc += serve[prev_i]
        p = acc - slo[i]
        cost += p + w * p if p > 0 else p
        waits.append(acc)
        pens.append(p)
        prev_m, prev_i = m, i
    return cost, waits, pens


def _queue_cost(problem: AssignmentProblem, q: int, seq: Sequence[int]) -> float:
    serve, comp, swap = problem.serve[q], problem.completion[q], problem.swap[q]
    gm, slo, w = problem.group_model, problem.slo, problem.violation_weight
    acc = 0.0
    prev_m = problem.resident[q]
    prev_i = -1
    cost = 0.0
    for i in seq:
        m = gm[i]
        if m != prev_m:
            if prev_i >= 0:
                acc += comp[prev_i]
            acc += swap[m]
        elif prev_i >= 0:
            acc += serve[prev_i]
        p = acc - slo[i]
        cost += p + w * p if p > 0 else p
        prev_m, prev_i = m, i
    return cost


def _order_key(seqs: Sequence[Sequence[int]]) -> tuple:
    """Tie-break order shared by the exact solvers: the depth-first visiting
    order of :func:`solve_exact` (lower group index first, closing a queue last)."""
    out: list[float] = []
    for seq in seqs:
        out.extend(seq)
        out.append(math.inf)
    return tuple(out)


def _make_plan(problem: AssignmentProblem, seqs: Sequence[Sequence[int]], solver: str,
               optimal: bool, t0: float) -> SchedulePlan:
    queues, waits, pens = {}, {}, {}
    total = 0.0
    for q, seq in enumerate(seqs):
        _, wt, p = _queue_eval(problem, q, seq)
        qid = problem.queues[q]
        queues[qid] = [problem.groups[i] for i in seq]
        waits[qid] = wt
        pens[qid] = p
    allp = [p for ps in pens.values() for p in ps]
    total = float(sum(allp))
    viol = float(sum(p for p in allp if p > 0))
    return SchedulePlan(
        queues=queues,
        predicted_wait=waits,
        penalties=pens,
        objective=total + problem.violation_weight * viol,
        total_penalty=total,
        violation=viol,
        length=problem.length,
        optimal=optimal,
        solver=solver,
        wall_time=time.perf_counter() - t0,
    )


def plan_penalty(plan: SchedulePlan, problem: AssignmentProblem) -> float:
    """Validate ``plan`` against ``problem`` and recompute its objective from scratch."""
    gidx = {g: i for i, g in enumerate(problem.groups)}
    seen: set[str] = set()
    if set(plan.queues) - set(problem.queues):
        raise PlanValidationError("plan references unknown queues")
    total = viol = 0.0
    for qi, qid in enumerate(problem.queues):
        seq = plan.queues.get(qid, [])
        if len(seq) > problem.length:
            raise PlanValidationError(f"queue {qid} holds {len(seq)} groups, length is {problem.length}")
        for gid in seq:
            if gid not in gidx:
                raise PlanValidationError(f"unknown group {gid}")
            if gid in seen:
                raise PlanValidationError(f"group {gid} assigned to more than one slot")
            seen.add(gid)
            if not problem.allowed(gidx[gid], qi):
                raise PlanValidationError(f"pinned group {gid} moved off its queue")
        idx = [gidx[g] for g in seq]
        waits = compose_waits(
            problem.serve[qi][idx] if idx else [],
            problem.completion[qi][idx] if idx else [],
            [problem.models[problem.group_model[i]] for i in idx],
            {m: problem.swap[qi][k] for k, m in enumerate(problem.models)},
            problem.models[problem.resident[qi]] if problem.resident[qi] >= 0 else None,
        )
        for i, wt in zip(idx, waits):
            p = wt - problem.slo[i]
            total += p
            viol += max(p, 0.0)
    if len(seen) != len(problem.groups):
        missing = sorted(set(problem.groups) - seen)
        raise PlanValidationError(f"groups left unassigned: {missing}")
    return total + problem.violation_weight * viol


# --------------------------------------------------------------------------- heuristic


def _initial_edf(problem: AssignmentProblem) -> list[list[int]]:
    nq, ng = len(problem.queues), len(problem.groups)
    best_serve = problem.serve.min(axis=0) if nq else np.zeros(ng)
    order = sorted(range(ng), key=lambda i: (problem.slo[i] - best_serve[i], i))
    order = [i for i in order if i in problem.pinned] + [i for i in order if i not in problem.pinned]
    seqs: list[list[int]] = [[] for _ in range(nq)]
    costs = [0.0] * nq
    for i in order:
        best = None
        for q in range(nq):
            if len(seqs[q]) >= problem.length or not problem.allowed(i, q):
                continue
            c = _queue_cost(problem, q, seqs[q] + [i])
            delta = c - costs[q]
            if best is None or delta < best[0] - _EPS:
                best = (delta, q, c)
        if best is None:
            raise ConfigError("no room for group during initial assignment")
        _, q, c = best
        seqs[q].append(i)
        costs[q] = c
    return seqs


def _local_search(problem: AssignmentProblem, seqs: list[list[int]], deadline: float,
                  max_passes: int = 100) -> list[list[int]]:
    nq, L = len(seqs), problem.length
    costs = [_queue_cost(problem, q, s) for q, s in enumerate(seqs)]
    for _ in range(max_passes):
        improved = False
        # single-group moves
        for q1 in range(nq):
            j1 = 0
            while j1 < len(seqs[q1]):
                if time.perf_counter() > deadline:
                    return seqs
                i = seqs[q1][j1]
                src = seqs[q1][:j1] + seqs[q1][j1 + 1:]
                src_cost = _queue_cost(problem, q1, src)
                moved = False
                for q2 in range(nq):
                    if not problem.allowed(i, q2):
                        continue
                    if q2 == q1:
                        base, base_cost = src, 0.0
                        before = costs[q1]
                    else:
                        if len(seqs[q2]) >= L:
                            continue
                        base, base_cost = seqs[q2], src_cost
                        before = costs[q1] + costs[q2]
                    for j2 in range(len(base) + 1):
                        if q2 == q1 and j2 == j1:
                            continue
                        cand = base[:j2] + [i] + base[j2:]
                        c2 = _queue_cost(problem, q2, cand)
                        if c2 + base_cost < before - _EPS:
                            if q2 == q1:
                                seqs[q1] = cand
                                costs[q1] = c2
                            else:
                                seqs[q1], seqs[q2] = src, cand
                                costs[q1], costs[q2] = src_cost, c2
                            improved = moved = True
                            break
                    if moved:
                        break
                if not moved:
                    j1 += 1
        # pairwise swaps
        slots = [(q, j) for q in range(nq) for j in range(len(seqs[q]))]
        for a in range(len(slots)):
            for b in range(a + 1, len(slots)):
                if time.perf_counter() > deadline:
                    return seqs
                (qa, ja), (qb, jb) = slots[a], slots[b]
                ia, ib = seqs[qa][ja], seqs[qb][jb]
                if problem.group_model[ia] == problem.group_model[ib] and \
                        problem.slo[ia] == problem.slo[ib] and qa == qb and \
                        problem.serve[qa][ia] == problem.serve[qa][ib] and \
                        problem.completion[qa][ia] == problem.completion[qa][ib]:
                    continue
                if not (problem.allowed(ia, qb) and problem.allowed(ib, qa)):
                    continue
                if qa == qb:
                    cand = list(seqs[qa])
                    cand[ja], cand[jb] = ib, ia
                    c = _queue_cost(problem, qa, cand)
                    if c < costs[qa] - _EPS:
                        seqs[qa], costs[qa] = cand, c
                        improved = True
                else:
                    ca, cb = list(seqs[qa]), list(seqs[qb])
                    ca[ja], cb[jb] = ib, ia
                    c1, c2 = _queue_cost(problem, qa, ca), _queue_cost(problem, qb, cb)
                    if c1 + c2 < costs[qa] + costs[qb] - _EPS:
                        seqs[qa], seqs[qb] = ca, cb
                        costs[qa], costs[qb] = c1, c2
                        improved = True
        if not improved:
            break
    return seqs


def solve_heuristic(problem: AssignmentProblem, budget: float = 5.0) -> SchedulePlan:
    """Slack-ordered greedy placement refined by move/swap local search.

    Always returns a valid plan; if the wall-clock ``budget`` runs out the
    current local-search state is returned.
    """
    t0 = time.perf_counter()
    seqs = _initial_edf(problem)
    seqs = _local_search(problem, seqs, deadline=t0 + budget)
    return _make_plan(problem, seqs, "heuristic", optimal=False, t0=t0)


# --------------------------------------------------------------------------- exact


def solve_exact(problem: AssignmentProblem, budget: float = 10.0) -> SchedulePlan:
    """Branch and bound over queue sequences.

    Queues are filled one at a time by appending groups; a node's bound is
    the cost so far plus, for every unplaced group, the cost at the smallest
    wait it could still get. The heuristic plan seeds the incumbent. If the
    budget runs out the incumbent is returned with ``optimal=False``.
    """
    t0 = time.perf_counter()
    deadline = t0 + budget
    nq, ng, L = len(problem.queues), len(problem.groups), problem.length
    w = problem.violation_weight
    gm, slo = problem.group_model, problem.slo
    serve, comp, swap, resident = problem.serve, problem.completion, problem.swap, problem.resident

    inc = _initial_edf(problem)
    inc = _local_search(problem, inc, deadline=t0 + min(budget / 4, 1.0))
    # the seed only bounds the search; a tied plan found depth-first replaces it
    best_cost = sum(_queue_cost(problem, q, s) for q, s in enumerate(inc)) + 2 * _EPS
    best = [list(s) for s in inc]

    # cheapest possible head-of-queue wait for each group on each queue
    head_wait = np.array([[0.0 if resident[q] == gm[i] else swap[q][gm[i]] for i in range(ng)]
                          for q in range(nq)]).reshape(nq, ng)
    pinned_to = [[i for i, q2 in problem.pinned.items() if q2 == q] for q in range(nq)]

    seqs: list[list[int]] = [[] for _ in range(nq)]
    unassigned = set(range(ng))
    nodes = 0
    timed_out = False

    def bound(q: int, acc_next_same: float, acc_next_diff: float, prev_m: int) -> float:
        lb = 0.0
        # a same-model group slotted in first may make the next transition cheaper
        same = [comp[q][j] for j in unassigned if gm[j] == prev_m]
        via_same = acc_next_same + min(same) if same else math.inf
        for i in unassigned:
            cands = []
            if len(seqs[q]) < L and problem.allowed(i, q):
                if not seqs[q]:
                    cands.append(head_wait[q][i])
                elif gm[i] == prev_m:
                    cands.append(acc_next_same)
                else:
                    cands.append(min(acc_next_diff, via_same) + swap[q][gm[i]])
            for q2 in range(q + 1, nq):
                if problem.allowed(i, q2):
                    cands.append(head_wait[q2][i])
            if not cands:
                return math.inf
            lb += _slot_cost(min(cands) - slo[i], w)
        return lb

    def rec(q: int, acc: float, prev_m: int, prev_i: int, cost: float) -> None:
        nonlocal best_cost, best, nodes, timed_out
        nodes += 1
        if nodes & 63 == 0 and time.perf_counter() > deadline:
            timed_out = True
        if timed_out:
            return
        if not unassigned:
            if cost < best_cost - _EPS:
                best_cost = cost
                best = [list(s) for s in seqs]
            return
        if prev_i >= 0:
            nxt_same = acc + serve[q][prev_i]
            nxt_diff = acc + comp[q][prev_i]
        else:
            nxt_same = nxt_diff = acc
        if cost + bound(q, nxt_same, nxt_diff, prev_m) >= best_cost - _EPS:
            return
        if len(seqs[q]) < L:
            for i in sorted(unassigned):
                if not problem.allowed(i, q):
                    continue
                m = gm[i]
                if not seqs[q]:
                    wt = 0.0 if m == prev_m else swap[q][m]
                elif m == prev_m:
                    wt = nxt_same
                else:
                    wt = nxt_diff + swap[q][m]
                p = wt - slo[i]
                seqs[q].append(i)
                unassigned.discard(i)
                rec(q, wt, m, i, cost + (p + w * p if p > 0 else p))
                unassigned.add(i)
                seqs[q].pop()
                if timed_out:
                    return
        # close this queue and move on
        if q + 1 < nq and all(i not in unassigned for i in pinned_to[q]):
            if len(unassigned) <= (nq - q - 1) * L:
                rec(q + 1, 0.0, resident[q + 1], -1, cost)

    if ng:
        rec(0, 0.0, resident[0], -1, 0.0)
    return _make_plan(problem, best, "exact", optimal=not timed_out, t0=t0)


# --------------------------------------------------------------------------- oracle


def brute_force_oracle(problem: AssignmentProblem, max_slots: int = 10, chunk: int = 200_000) -> SchedulePlan:
    """Exhaustive search over every placement of groups into slots.

    Padding slots may sit anywhere, including between groups. Evaluation is
    vectorised over candidate placements and written independently of the
    solvers' cost code.
    """
    t0 = time.perf_counter()
    nq, ng, L = len(problem.queues), len(problem.groups), problem.length
    S = nq * L
    if S > max_slots:
        raise ConfigError(f"brute force limited to {max_slots} slots, problem has {S}")
    gm = np.asarray(problem.group_model + [-2], int)  # index ng = padding
    slo = np.asarray(problem.slo + [0.0], float)
    serve = np.concatenate([problem.serve, np.zeros((nq, 1))], axis=1)
    comp = np.concatenate([problem.completion, np.zeros((nq, 1))], axis=1)
    swap = np.concatenate([problem.swap, np.zeros((nq, 1))], axis=1)
    w = problem.violation_weight
    allowed = np.ones((ng, S), bool)
    for i, q in problem.pinned.items():
        allowed[i] = False
        allowed[i, q * L:(q + 1) * L] = True

    found: list[tuple[float, tuple, list[list[int]]]] = []
    perms = itertools.permutations(range(S), ng)
    while True:
        block = list(itertools.islice(perms, chunk))
        if not block and found:
            break
        pos = np.array(block, int).reshape(len(block), ng)
        if ng:
            ok = allowed[np.arange(ng)[None, :], pos].all(axis=1)
            pos = pos[ok]
        n = len(pos)
        if n == 0:
            if not block:
                break
            continue
        sg = np.full((n, S), ng, int)
        if ng:
            sg[np.arange(n)[:, None], pos] = np.arange(ng)[None, :]
        cost = np.zeros(n)
        for q in range(nq):
            acc = np.zeros(n)
            prev_m = np.full(n, problem.resident[q])
            prev_i = np.full(n, -1)
            for j in range(L):
                gi = sg[:, q * L + j]
                occ = gi < ng
                m = gm[gi]
                trans = occ & (m != prev_m)
                has_prev = prev_i >= 0
                pi = np.where(has_prev, prev_i, ng)
                acc = acc + np.where(trans & has_prev, comp[q][pi], 0.0)
                acc = acc + np.where(trans, swap[q][np.where(occ, m, len(swap[q]) - 1)], 0.0)
                acc = acc + np.where(occ & ~trans & has_prev, serve[q][pi], 0.0)
                p = acc - slo[gi]
                cost = cost + np.where(occ, p + w * np.maximum(p, 0.0), 0.0)
                prev_m = np.where(occ, m, prev_m)
                prev_i = np.where(occ, gi, prev_i)
        # near-ties resolve to the order solve_exact would visit first
        lo = float(cost.min())
        cands = []
        for k in np.flatnonzero(cost <= lo + _EPS):
            seqs = [[int(i) for i in sg[k, q * L:(q + 1) * L] if i < ng] for q in range(nq)]
            cands.append((_order_key(seqs), float(cost[k]), seqs))
        key, c, seqs = min(cands, key=lambda t: t[0])
        found.append((c, key, seqs))
        if not block:
            break
    lo = min(c for c, _, _ in found)
    _, _, seqs = min((t for t in found if t[0] <= lo + _EPS), key=lambda t: t[1])
    return _make_plan(problem, seqs, "brute_force", optimal=True, t0=t0)


# --------------------------------------------------------------------------- MILP adapter


@dataclass
class MilpModel:
    c: np.ndarray
    A: Any
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    var_lb: np.ndarray
    var_ub: np.ndarray
    x_index: dict[tuple[int, int, int], int]


def build_milp(problem: AssignmentProblem) -> MilpModel:
    """Linearised mixed-integer program for the assignment.

    Binaries ``x[q,i,j]`` place group ``i`` at slot ``j`` of queue ``q``.
    Model indicators are linear in ``x``; transitions into slot ``j`` use
    ``u[q,j,m] >= y[q,j,m] - y[q,j-1,m]``; the completion-instead-of-serve
    surcharge of a group followed by a transition uses ``z = x * t`` through
    ``z >= x + t - 1``. Padding is forced to the tail of each queue and
    penalties of empty slots are switched off with a big-M term.
    """
    from scipy.sparse import lil_matrix

    nq, ng, L, nm = len(problem.queues), len(problem.groups), problem.length, len(problem.models)
    w = problem.violation_weight
    idx = itertools.count()
    X = {(q, i, j): next(idx) for q in range(nq) for i in range(ng) for j in range(L)}
    U = {(q, j, m): next(idx) for q in range(nq) for j in range(L) for m in range(nm)}
    Z = {(q, i, j): next(idx) for q in range(nq) for i in range(ng) for j in range(L - 1)}
    P = {(q, j): next(idx) for q in range(nq) for j in range(L)}
    V = {(q, j): next(idx) for q in range(nq) for j in range(L)}
    nv = next(idx)
    big_m = float(problem.completion.sum() + problem.swap.max(initial=0.0) * nq * L
                  + max(problem.slo, default=0.0) + 1.0)

    rows: list[tuple[dict[int, float], float, float]] = []

    def add(coefs: dict[int, float], lo: float, hi: float) -> None:
        rows.append((coefs, lo, hi))

    for i in range(ng):
        add({X[q, i, j]: 1.0 for q in range(nq) for j in range(L)}, 1.0, 1.0)
    for q in range(nq):
        for j in range(L):
            add({X[q, i, j]: 1.0 for i in range(ng)}, 0.0, 1.0)
            if j + 1 < L:
                d: dict[int, float] = {}
                for i in range(ng):
                    d[X[q, i, j]] = d.get(X[q, i, j], 0.0) + 1.0
                    d[X[q, i, j + 1]] = d.get(X[q, i, j + 1], 0.0) - 1.0
                add(d, 0.0, math.inf)
            for m in range(nm):
                # u - y_j + y_{j-1} >= 0   (j = 0: u - y_0 >= -[resident == m])
                d = {U[q, j, m]: 1.0}
                for i in range(ng):
                    if problem.group_model[i] == m:
                        d[X[q, i, j]] = d.get(X[q, i, j], 0.0) - 1.0
                        if j > 0:
                            d[X[q, i, j - 1]] = d.get(X[q, i, j - 1], 0.0) + 1.0
                rhs = -1.0 if (j == 0 and problem.resident[q] == m) else 0.0
                add(d, rhs, math.inf)
        for i in range(ng):
            for j in range(L - 1):
                # z - x - t_{j+1} >= -1
                d = {Z[q, i, j]: 1.0, X[q, i, j]: -1.0}
                for m in range(nm):
                    d[U[q, j + 1, m]] = d.get(U[q, j + 1, m], 0.0) - 1.0
                add(d, -1.0, math.inf)
        for j in range(L):
            # p - wt + sum slo x - M occ >= -M
            d = {P[q, j]: 1.0}
            for k in range(j):
                for i in range(ng):
                    d[X[q, i, k]] = d.get(X[q, i, k], 0.0) - problem.serve[q][i]
                    if k < L - 1:
                        extra = problem.completion[q][i] - problem.serve[q][i]
                        d[Z[q, i, k]] = d.get(Z[q, i, k], 0.0) - extra
            for k in range(j + 1):
                for m in range(nm):
                    d[U[q, k, m]] = d.get(U[q, k, m], 0.0) - problem.swap[q][m]
            for i in range(ng):
                d[X[q, i, j]] = d.get(X[q, i, j], 0.0) + problem.slo[i] - big_m
            add(d, -big_m, math.inf)
            # p + M occ >= 0
            d = {P[q, j]: 1.0}
            for i in range(ng):
                d[X[q, i, j]] = big_m
            add(d, 0.0, math.inf)
            add({V[q, j]: 1.0, P[q, j]: -1.0}, 0.0, math.inf)

    A = lil_matrix((len(rows), nv))
    lo = np.empty(len(rows))
    hi = np.empty(len(rows))
    for r, (coefs, a, b) in enumerate(rows):
        for k, v in coefs.items():
            if v != 0.0:
                A[r, k] = v
        lo[r], hi[r] = a, b
    c = np.zeros(nv)
    for k in P.values():
        c[k] = 1.0
    for k in V.values():
        c[k] = w
    integrality = np.zeros(nv)
    var_lb = np.zeros(nv)
    var_ub = np.full(nv, np.inf)
    for (q, i, j), k in X.items():
        integrality[k] = 1
        var_ub[k] = 0.0 if not problem.allowed(i, q) else 1.0
    for k in U.values():
        var_ub[k] = 1.0
    for k in P.values():
        var_lb[k] = -np.inf
    return MilpModel(c, A.tocsr(), lo, hi, integrality, var_lb, var_ub, X)


def solve_milp(problem: AssignmentProblem, budget: float = 30.0) -> SchedulePlan:
    """Solve the linearised program with scipy's HiGHS backend."""
    from scipy.optimize import Bounds, LinearConstraint, milp

    t0 = time.perf_counter()
    mdl = build_milp(problem)
    res = milp(
        mdl.c,
        constraints=LinearConstraint(mdl.A, mdl.lb, mdl.ub),
        integrality=mdl.integrality,
        bounds=Bounds(mdl.var_lb, mdl.var_ub),
        options={"time_limit": budget},
    )
    if res.x is None:
        raise ConfigError(f"MILP backend failed: {res.message}")
    nq, L = len(problem.queues), problem.length
    slots: list[list[int | None]] = [[None] * L for _ in range(nq)]
    for (q, i, j), k in mdl.x_index.items():
        if res.x[k] > 0.5:
            slots[q][j] = i
    seqs = [[i for i in s if i is not None] for s in slots]
    return _make_plan(problem, seqs, "milp", optimal=res.status == 0, t0=t0)
