"""Synthetic workload generation and trace ingestion.

Default token lengths follow a ShareGPT-like lognormal shape. The public
ShareGPT conversation dump is commonly summarised as averaging ~161 prompt
tokens and ~338 completion tokens per request; the defaults below match those
means with a coefficient of variation of 1.2 (input) and 1.0 (output):

    sigma = sqrt(ln(1 + cv**2)),  mu = ln(mean) - sigma**2 / 2

and truncate at 4096 total tokens (2048 output).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import ConfigError, Request, TokenStats

log = logging.getLogger(__name__)


def lognormal_params(mean: float, cv: float) -> tuple[float, float]:
    """Return (log-mean, log-std) of a lognormal with the given mean and CV."""
    sigma = math.sqrt(math.log1p(cv * cv))
    return math.log(mean) - sigma * sigma / 2, sigma


SHAREGPT_INPUT = lognormal_params(161.0, 1.2)
SHAREGPT_OUTPUT = lognormal_params(338.0, 1.0)


@dataclass(frozen=True)
class TokenDistParams:
    """Input/output token length distribution.

    For ``family="lognormal"`` the ``input``/``output`` entries are
    ``(log_mean, log_std)``. For ``family="empirical"`` they are
    ``(bin_edges, probabilities)`` histograms; values are drawn uniformly
    within the chosen bin.
    """

    family: str = "lognormal"
    input: tuple = SHAREGPT_INPUT
    output: tuple = SHAREGPT_OUTPUT
    max_total: int = 4096
    max_output: int = 2048

    def validate(self) -> None:
        if self.family not in ("lognormal", "empirical"):
            raise ConfigError(f"unknown token distribution family {self.family!r}")
        if self.max_total < 2 or self.max_output < 1:
            raise ConfigError("truncation limits too small")
        for which, p in (("input", self.input), ("output", self.output)):
            if self.family == "lognormal":
                if len(p) != 2 or not p[1] >= 0 or not math.isfinite(p[0]):
                    raise ConfigError(f"bad lognormal {which} params {p!r}")
            else:
                edges, probs = np.asarray(p[0], float), np.asarray(p[1], float)
                if len(edges) != len(probs) + 1 or np.any(np.diff(edges) <= 0) or edges[0] < 1:
                    raise ConfigError(f"bad empirical {which} histogram")
                if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, rel_tol=1e-6):
                    raise ConfigError(f"empirical {which} probabilities must sum to 1")

    def _draw(self, rng: np.random.Generator, p: tuple) -> float:
        if self.family == "lognormal":
            return float(rng.lognormal(p[0], p[1]))
        edges, probs = np.asarray(p[0], float), np.asarray(p[1], float)
        b = int(rng.choice(len(probs), p=probs))
        return float(rng.uniform(edges[b], edges[b + 1]))

    def sample(self, rng: np.random.Generator) -> tuple[int, int]:
        """Draw one (input, output) pair honouring positivity and truncation."""
        for _ in range(10_000):
            i = max(1, int(round(self._draw(rng, self.input))))
            o = max(1, int(round(self._draw(rng, self.output))))
            if o <= self.max_output and i + o <= self.max_total:
                return i, o
        raise ConfigError("token distribution almost never satisfies truncation limits")


@dataclass(frozen=True)
class SloClassConfig:
    name: str
    slo: float
    arrival_rate: float
    models: dict[str, float]  # model name -> selection weight
    token_dist: TokenDistParams = field(default_factory=TokenDistParams)
    # optional piecewise-constant rate multipliers: [(start_s, multiplier), ...]
    rate_schedule: tuple[tuple[float, float], ...] = ()

    def validate(self) -> None:
        if not self.slo > 0:
            raise ConfigError(f"class {self.name}: slo must be > 0")
        if not self.arrival_rate > 0:
            raise ConfigError(f"class {self.name}: arrival_rate must be > 0")
        if not self.models:
            raise ConfigError(f"class {self.name}: no models")
        w = np.array(list(self.models.values()), float)
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-9, abs_tol=1e-9):
            raise ConfigError(f"class {self.name}: model weights must be >= 0 and sum to 1")
        for start, mult in self.rate_schedule:
            if start < 0 or mult < 0:
                raise ConfigError(f"class {self.name}: bad rate schedule entry")
        self.token_dist.validate()


@dataclass(frozen=True)
class WorkloadConfig:
    duration: float
    classes: tuple[SloClassConfig, ...]
    seed: int = 0

    def validate(self) -> None:
        if not self.duration > 0:
            raise ConfigError("duration must be > 0")
        if not self.classes:
            raise ConfigError("workload needs at least one class")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise ConfigError("class names must be unique")
        for c in self.classes:
            c.validate()


@dataclass(frozen=True)
class Trace:
    requests: tuple[Request, ...]
    provenance: str = ""

    def __post_init__(self) -> None:
        ids = [r.id for r in self.requests]
        if len(set(ids)) != len(ids):
            raise ConfigError("trace contains duplicate request ids")
        times = [r.arrival_time for r in self.requests]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("trace requests must be sorted by arrival_time")

    def __len__(self) -> int:
        return len(self.requests)

    def __iter__(self):
        return iter(self.requests)

    @classmethod
    def from_requests(cls, requests: Iterable[Request], provenance: str = "") -> Trace:
        return cls(tuple(sorted(requests, key=lambda r: (r.arrival_time, r.id))), provenance)


def _arrival_times(rng: np.random.Generator, cls: SloClassConfig, duration: float) -> list[float]:
    """Poisson arrivals; a rate schedule is handled by thinning."""
    if not cls.rate_schedule:
        times, t = [], 0.0
        while True:
            t += rng.exponential(1.0 / cls.arrival_rate)
            if t >= duration:
                return times
            times.append(t)
    sched = sorted(cls.rate_schedule)
    peak = cls.arrival_rate * max([1.0] + [m for _, m in sched])

    def mult(t: float) -> float:
        m = 1.0
        for start, k in sched:
            if t >= start:
                m = k
        return m

    times, t = [], 0.0
    while True:
        t += rng.exponential(1.0 / peak)
        if t >= duration:
            return times
        if rng.random() * peak < cls.arrival_rate * mult(t):
            times.append(t)


def generate_workload(config: WorkloadConfig) -> Trace:
    """Sample a trace: independent Poisson streams per SLO class."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    reqs: list[Request] = []
    for ci, cls in enumerate(config.classes):
        models = sorted(cls.models)
        weights = np.array([cls.models[m] for m in models], float)
        weights = weights / weights.sum()
        for k, t in enumerate(_arrival_times(rng, cls, config.duration)):
            model = models[int(rng.choice(len(models), p=weights))]
            i, o = cls.token_dist.sample(rng)
            reqs.append(
                Request(
                    id=f"{cls.name}-{k:06d}",
                    arrival_time=round(t, 9),
                    model=model,
                    slo=cls.slo,
                    input_tokens=i,
                    output_tokens=o,
                    slo_class=cls.name,
                )
            )
    return Trace.from_requests(reqs, provenance=f"generated seed={config.seed}")


_FIELDS = {
    "id": str,
    "arrival_s": (int, float),
    "model": str,
    "slo_s": (int, float),
    "input_tokens": int,
    "output_tokens": int,
}


class TraceFormatError(ConfigError):
    pass


def _parse_line(line: str, lineno: int) -> Request:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise TraceFormatError(f"line {lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(obj, dict):
        raise TraceFormatError(f"line {lineno}: expected a JSON object")
    for name, typ in _FIELDS.items():
        if name not in obj:
            raise TraceFormatError(f"line {lineno}: missing field {name!r}")
        val = obj[name]
        if isinstance(val, bool) or not isinstance(val, typ):
            raise TraceFormatError(f"line {lineno}: field {name!r} has wrong type")
    if obj["input_tokens"] < 1:
        raise TraceFormatError(f"line {lineno}: field 'input_tokens' must be >= 1")
    if obj["output_tokens"] < 1:
        raise TraceFormatError(f"line {lineno}: field 'output_tokens' must be >= 1")
    if not obj["slo_s"] > 0:
        raise TraceFormatError(f"line {lineno}: field 'slo_s' must be > 0")
    if obj["arrival_s"] < 0:
        raise TraceFormatError(f"line {lineno}: field 'arrival_s' must be >= 0")
    cls = obj.get("class")
    if cls is not None and not isinstance(cls, str):
        raise TraceFormatError(f"line {lineno}: field 'class' has wrong type")
    return Request(
        id=obj["id"],
        arrival_time=float(obj["arrival_s"]),
        model=obj["model"],
        slo=float(obj["slo_s"]),
        input_tokens=obj["input_tokens"],
        output_tokens=obj["output_tokens"],
        slo_class=cls,
    )


def load_trace(path: str | Path) -> Trace:
    """Read a JSONL trace. Out-of-order arrivals are re-sorted with a warning."""
    path = Path(path)
    reqs: list[Request] = []
    seen: set[str] = set()
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            r = _parse_line(line, lineno)
            if r.id in seen:
                raise TraceFormatError(f"line {lineno}: duplicate id {r.id!r}")
            seen.add(r.id)
            reqs.append(r)
    if any(b.arrival_time < a.arrival_time for a, b in zip(reqs, reqs[1:])):
        log.warning("%s: arrivals out of order, re-sorting", path)
    return Trace.from_requests(reqs, provenance=str(path))


def dump_trace(trace: Trace, path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in trace.requests:
            obj = {
                "id": r.id,
                "arrival_s": r.arrival_time,
                "model": r.model,
                "slo_s": r.slo,
                "input_tokens": r.input_tokens,
                "output_tokens": r.output_tokens,
            }
            if r.slo_class is not None:
                obj["class"] = r.slo_class
            fh.write(json.dumps(obj) + "\n")


def fit_token_stats(
    trace: Trace | Sequence[Request], predicate: Callable[[Request], bool] | None = None
) -> TokenStats:
    """Sample mean and (n-1) standard deviation of token counts."""
    sel = [r for r in trace if predicate is None or predicate(r)]
    if len(sel) < 2:
        raise ConfigError(f"need at least 2 matching requests to fit token stats, got {len(sel)}")
    inp = np.array([r.input_tokens for r in sel], float)
    out = np.array([r.output_tokens for r in sel], float)
    return TokenStats(
        mean_output=float(out.mean()),
        std_output=float(out.std(ddof=1)),
        mean_input=float(inp.mean()),
        std_input=float(inp.std(ddof=1)),
    )


def inject_mega_prompts(
    trace: Trace,
    fraction: float,
    total_token_range: tuple[int, int] = (3000, 4000),
    seed: int = 0,
    capacity_limit: int | None = None,
) -> Trace:
    """Rewrite a seeded fraction of requests into mega prompts.

    The chosen total is split evenly between input and output tokens.
    ``capacity_limit`` is the largest token capacity of any instance; a range
    that cannot fit anywhere is rejected.
    """
    lo, hi = total_token_range
    if not 0 <= fraction <= 1:
        raise ConfigError("fraction must be in [0, 1]")
    if lo < 2 or hi < lo:
        raise ConfigError("bad total token range")
    if capacity_limit is not None and hi > capacity_limit:
        raise ConfigError(f"mega prompt range up to {hi} exceeds every instance capacity {capacity_limit}")
    n = len(trace)
    k = int(round(fraction * n))
    if k == 0:
        return trace
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=k, replace=False).tolist())
    out = []
    for idx, r in enumerate(trace.requests):
        if idx in chosen:
            total = int(rng.integers(lo, hi + 1))
            inp = total // 2
            r = replace(r, input_tokens=inp, output_tokens=total - inp)
        out.append(r)
    return Trace(tuple(out), provenance=trace.provenance + f" +mega({fraction:g})")
