"""Metric computation from event logs and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .workload import Trace

# wall-clock measurements differ run to run; kept out of deterministic output
TIMING_FIELDS = ("solver_wall_time",)
COLUMNS = ("point", "seed", "policy", "metric", "class", "value")


@dataclass
class MetricsReport:
    attainment: dict[str, float]
    p99_ttft: dict[str, float]
    throughput: float
    drain_time: float
    completed: int
    swaps: int
    evictions: int
    preemptions: int
    estimator_r2: float | None
    solver_wall_time: float = 0.0
    busy_fraction: float | None = None
    partial: bool = False
    point: str = ""
    seed: int = 0
    policy: str = ""
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k, v in self.attainment.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"attainment for {k} out of range: {v}")
        if min(self.swaps, self.evictions, self.preemptions, self.completed) < 0:
            raise ValueError("counts must be >= 0")

    @property
    def overall_attainment(self) -> float:
        return self.extra.get("attainment_all", float("nan"))

    def rows(self, timing: bool = False) -> list[tuple[Any, ...]]:
        head = (self.point, self.seed, self.policy)
        out = []
        for c in sorted(self.attainment):
            out.append(head + ("attainment", c, self.attainment[c]))
        for c in sorted(self.p99_ttft):
            out.append(head + ("p99_ttft", c, self.p99_ttft[c]))
        scalars = {
            "throughput": self.throughput,
            "drain_time": self.drain_time,
            "completed": self.completed,
            "swaps": self.swaps,
            "evictions": self.evictions,
            "preemptions": self.preemptions,
            "estimator_r2": self.estimator_r2,
            "busy_fraction": self.busy_fraction,
            "partial": int(self.partial),
        }
        if timing:
            scalars["solver_wall_time"] = self.solver_wall_time
        scalars.update(self.extra)
        for k in sorted(scalars):
            out.append(head + (k, "", scalars[k]))
        return out

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetricsReport:
        return cls(**dict(d))


def nearest_rank(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value."""
    if not values:
        return float("nan")
    xs = sorted(values)
    k = max(1, math.ceil(pct / 100.0 * len(xs)))
    return xs[k - 1]


def r_squared(estimated: Sequence[float], realized: Sequence[float]) -> float | None:
    """Squared Pearson correlation, i.e. R^2 of the least-squares line."""
    if len(estimated) < 3:
        return None
    x, y = np.asarray(estimated, float), np.asarray(realized, float)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1] ** 2)


def compute_metrics(
    log,
    trace: Trace,
    *,
    solver_wall_time: float = 0.0,
    busy_time: Mapping[str, float] | None = None,
    point: str = "",
    seed: int = 0,
    policy: str = "",
) -> MetricsReport:
    """Metrics from an event log (any iterable of record dicts) and its trace."""
    first: dict[str, float] = {}
    done: dict[str, float] = {}
    pulled: dict[str, float] = {}
    est: dict[str, float] = {}
    swaps = evictions = preemptions = 0
    for rec in log:
        kind = rec["kind"]
        if kind == "first-token":
            first.setdefault(rec["request"], rec["t"])
        elif kind == "completion":
            done[rec["request"]] = rec["t"]
        elif kind == "pull":
            pulled.setdefault(rec["request"], rec["t"])
        elif kind == "queued" and "est_wait" in rec:
            est.setdefault(rec["request"], rec["est_wait"])
        elif kind == "swap-start":
            swaps += 1
        elif kind == "evict-start":
            evictions += 1
        elif kind == "preemption":
            preemptions += 1

    by_class: dict[str, list[float]] = {}
    met: dict[str, list[bool]] = {}
    for r in trace.requests:
        c = r.class_key
        by_class.setdefault(c, [])
        met.setdefault(c, [])
        if r.id in first:
            ttft = first[r.id] - r.arrival_time
            by_class[c].append(ttft)
            met[c].append(ttft <= r.slo)
        else:
            met[c].append(False)
    attainment = {c: float(np.mean(v)) for c, v in met.items() if v}
    p99 = {c: nearest_rank(v, 99) for c, v in by_class.items() if v}
    all_met = [m for v in met.values() for m in v]

    arrivals = {r.id: r.arrival_time for r in trace.requests}
    partial = len(done) < len(trace)
    if done:
        t0 = min(r.arrival_time for r in trace.requests)
        drain = max(done.values()) - t0
        throughput = len(done) / drain if drain > 0 else float("nan")
    else:
        drain, throughput = 0.0, 0.0

    pairs = [(est[k], pulled[k] - arrivals[k]) for k in sorted(est) if k in pulled]
    r2 = r_squared([a for a, _ in pairs], [b for _, b in pairs]) if pairs else None

    busy = None
    if busy_time and drain > 0:
        busy = min(1.0, float(np.mean([b / drain for b in busy_time.values()])))
    extra = {"attainment_all": float(np.mean(all_met)) if all_met else float("nan")}
    return MetricsReport(
        attainment=attainment,
        p99_ttft=p99,
        throughput=throughput,
        drain_time=drain,
        completed=len(done),
        swaps=swaps,
        evictions=evictions,
        preemptions=preemptions,
        estimator_r2=r2,
        solver_wall_time=solver_wall_time,
        busy_fraction=busy,
        partial=partial,
        point=point,
        seed=seed,
        policy=policy,
        extra=extra,
    )


def metrics_from_result(result, point: str = "") -> MetricsReport:
    return compute_metrics(
        result.log, result.trace,
        solver_wall_time=result.solver_time, busy_time=result.busy_time,
        point=point, seed=result.config.seed, policy=result.config.policy,
    )


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:.6g}"
    return str(v)


def _round6(v: Any) -> Any:
    if isinstance(v, float) and math.isfinite(v):
        return float(f"{v:.6g}")
    if isinstance(v, dict):
        return {k: _round6(x) for k, x in v.items()}
    return v


def render_csv(reports: Sequence[MetricsReport], timing: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rep in reports:
        for row in rep.rows(timing=timing):
            w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def render_json(reports: Sequence[MetricsReport], timing: bool = False) -> str:
    out = []
    for rep in reports:
        d = {k: _round6(v) for k, v in rep.to_dict().items()}
        if not timing:
            for k in TIMING_FIELDS:
                d.pop(k)
        out.append(d)
    return json.dumps(out, sort_keys=True, indent=1, allow_nan=True) + "\n"


def emit_report(
    reports: Sequence[MetricsReport], fmt: str, path: str | Path, timing: bool = False
) -> Path:
    """Write reports as long-format CSV or JSON.

    Wall-clock fields are left out unless ``timing`` is set so that reruns of
    the same configuration produce identical bytes.
    """
    if fmt == "csv":
        text = render_csv(reports, timing)
    elif fmt == "json":
        text = render_json(reports, timing)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def load_json_reports(path: str | Path) -> list[MetricsReport]:
    return [MetricsReport.from_dict(d) for d in json.loads(Path(path).read_text())]
