"""Shared domain types and request accounting.

All durations are seconds on the simulation clock; GPU memory is counted in
tokens (prompt tokens plus tokens generated so far).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class EventLogError(ValueError):
    """Malformed or inconsistent event log."""


@dataclass(frozen=True, order=True)
class ModelId:
    name: str
    parameter_scale: float = 0.0  # informational only, e.g. 13e9

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Request:
    """One prompt plus its metadata.

    ``output_tokens`` is simulator ground truth. The estimator and the global
    scheduler never receive it; they work from :class:`TokenStats`.
    """

    id: str
    arrival_time: float
    model: str
    slo: float
    input_tokens: int
    output_tokens: int
    group: str | None = None
    slo_class: str | None = None

    def __post_init__(self) -> None:
        if self.input_tokens < 1:
            raise ConfigError(f"request {self.id}: input_tokens must be >= 1")
        if self.output_tokens < 1:
            raise ConfigError(f"request {self.id}: output_tokens must be >= 1")
        if not self.slo > 0:
            raise ConfigError(f"request {self.id}: slo must be > 0")
        if self.arrival_time < 0:
            raise ConfigError(f"request {self.id}: arrival_time must be >= 0")

    @property
    def deadline(self) -> float:
        return self.arrival_time + self.slo

    @property
    def class_key(self) -> str:
        return self.slo_class if self.slo_class is not None else f"slo={self.slo:g}s"


@dataclass(frozen=True)
class TokenStats:
    mean_output: float
    std_output: float
    mean_input: float
    std_input: float

    def __post_init__(self) -> None:
        if not (self.mean_output > 0 and self.mean_input > 0):
            raise ConfigError("token means must be > 0")
        if self.std_output < 0 or self.std_input < 0:
            raise ConfigError("token stds must be >= 0")

    @property
    def mean_footprint(self) -> float:
        return self.mean_input + self.mean_output

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TokenStats:
        return cls(**{k: float(d[k]) for k in ("mean_output", "std_output", "mean_input", "std_input")})


@dataclass(frozen=True)
class InstanceProfile:
    """Timing constants for one (model, GPU type) pair.

    ``theta`` and ``inefficiency`` are measured by profiling; the rest describe
    the hardware/model combination and drive the simulator.
    """

    model: str
    gpu_type: str
    theta: float
    decode_per_token: float
    inefficiency: float
    prefill: float
    token_capacity: int
    swap_cold: float
    swap_warm: float
    kv_transfer_bandwidth: float
    max_output_tokens: int

    def __post_init__(self) -> None:
        if not self.theta > 0:
            raise ConfigError("theta must be > 0")
        if not self.decode_per_token > 0:
            raise ConfigError("decode_per_token must be > 0")
        if self.inefficiency < 1:
            raise ConfigError("inefficiency must be >= 1")
        if self.prefill < 0:
            raise ConfigError("prefill must be >= 0")
        if self.token_capacity < 2:
            raise ConfigError("token_capacity too small")
        if not self.swap_cold >= self.swap_warm >= 0:
            raise ConfigError("require swap_cold >= swap_warm >= 0")
        if not self.kv_transfer_bandwidth > 0:
            raise ConfigError("kv_transfer_bandwidth must be > 0")
        if self.max_output_tokens < 1:
            raise ConfigError("max_output_tokens must be >= 1")

    @property
    def key(self) -> tuple[str, str]:
        return (self.model, self.gpu_type)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> InstanceProfile:
        return cls(
            model=str(d["model"]),
            gpu_type=str(d["gpu_type"]),
            theta=float(d["theta"]),
            decode_per_token=float(d["decode_per_token"]),
            inefficiency=float(d["inefficiency"]),
            prefill=float(d["prefill"]),
            token_capacity=int(d["token_capacity"]),
            swap_cold=float(d["swap_cold"]),
            swap_warm=float(d["swap_warm"]),
            kv_transfer_bandwidth=float(d["kv_transfer_bandwidth"]),
            max_output_tokens=int(d["max_output_tokens"]),
        )


@dataclass(frozen=True)
class SloViolationReport:
    group: str
    queue: str
    predicted_wait: float
    slo: float

    @property
    def slack(self) -> float:
        return self.slo - self.predicted_wait

    @property
    def violated(self) -> bool:
        return self.slack < 0


@dataclass(frozen=True)
class InstanceSpec:
    """A simulated serving instance: one GPU that can host any profiled model.

    ``profiles`` maps model name to that model's profile on this GPU.
    ``warm_slots`` is how many non-resident models the CPU tier can hold.
    """

    id: str
    gpu_type: str
    profiles: dict[str, InstanceProfile] = field(hash=False)
    initial_model: str | None = None
    warm_slots: int = 1

    def __post_init__(self) -> None:
        if not self.profiles:
            raise ConfigError(f"instance {self.id}: no model profiles")
        for name, prof in self.profiles.items():
            if prof.model != name or prof.gpu_type != self.gpu_type:
                raise ConfigError(f"instance {self.id}: profile key mismatch for {name}")
        if self.initial_model is not None and self.initial_model not in self.profiles:
            raise ConfigError(f"instance {self.id}: unknown initial model {self.initial_model}")
        if self.warm_slots < 0:
            raise ConfigError("warm_slots must be >= 0")

    @classmethod
    def single(cls, id: str, profile: InstanceProfile, warm_slots: int = 1) -> InstanceSpec:
        return cls(id, profile.gpu_type, {profile.model: profile}, profile.model, warm_slots)

    def profile(self, model: str) -> InstanceProfile:
        try:
            return self.profiles[model]
        except KeyError:
            raise ConfigError(f"instance {self.id} has no profile for model {model}") from None


def ttft(request: Request, first_token_time: float) -> float:
    """Time to first token."""
    value = first_token_time - request.arrival_time
    if value < 0 or math.isnan(value):
        raise EventLogError(
            f"request {request.id}: first token at {first_token_time} precedes arrival "
            f"at {request.arrival_time}"
        )
    return value


def slo_met(request: Request, first_token_time: float) -> bool:
    return ttft(request, first_token_time) <= request.slo
