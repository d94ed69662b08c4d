"""Post-hoc invariant checks over a simulation result.

Capacity and token exactness are checked inside the simulator at every
iteration boundary; the rest is reconstructed from the event log.
"""

from __future__ import annotations

from collections import Counter


def check_invariants(result, require_complete: bool = True) -> list[str]:
    errs = list(result.violations)
    log = result.log
    trace = result.trace
    ids = {r.id for r in trace.requests}
    arrival = {r.id: r.arrival_time for r in trace.requests}

    last_t = float("-inf")
    for rec in log:
        if rec["t"] < last_t - 1e-9:
            errs.append(f"log time decreases at {rec}")
        last_t = rec["t"]

    arrivals = Counter(r["request"] for r in log.of_kind("arrival"))
    completions = Counter(r["request"] for r in log.of_kind("completion"))
    rejected = {r["request"] for r in log.of_kind("reject")}
    for rid in ids:
        if arrivals[rid] != 1 and (require_complete or arrivals[rid] > 1):
            errs.append(f"request {rid} has {arrivals[rid]} arrival records")
        if completions[rid] > 1:
            errs.append(f"request {rid} completed {completions[rid]} times")
        if require_complete and rid not in rejected and completions[rid] != 1:
            errs.append(f"request {rid} never completed")
    for rid in set(arrivals) - ids:
        errs.append(f"unknown request {rid} in log")

    first = {}
    for r in log.of_kind("first-token"):
        if r["request"] in first:
            errs.append(f"request {r['request']} has two first tokens")
        first[r["request"]] = r["t"]
    for r in log.of_kind("completion"):
        rid = r["request"]
        if rid not in first or first[rid] > r["t"] + 1e-9:
            errs.append(f"request {rid} completed before its first token")
        if r["t"] < arrival[rid] - 1e-9:
            errs.append(f"request {rid} completed before arriving")

    # FCFS within a group: first admissions follow arrival order
    order: dict[str, list[str]] = {}
    seen: set[str] = set()
    for r in log.of_kind("pull"):
        rid = r["request"]
        if rid in seen or "group" not in r:
            continue
        seen.add(rid)
        order.setdefault(r["group"], []).append(rid)
    for gid, rids in order.items():
        keys = [(arrival[x], x) for x in rids]
        if keys != sorted(keys):
            errs.append(f"group {gid} admitted out of arrival order")

    # plan bijection: every planned group appears in exactly one queue slot
    for r in log.of_kind("plan-applied"):
        flat = [g for gs in r["queues"].values() for g in gs]
        dup = [g for g, c in Counter(flat).items() if c > 1]
        if dup:
            errs.append(f"plan at t={r['t']} places groups twice: {dup[:3]}")
    return errs
