"""SLO-aware scheduling for LLM serving: request groups, virtual queues and a
global planner, evaluated on a deterministic continuous-batching simulator."""

from .core import ConfigError, InstanceProfile, InstanceSpec, Request, SloViolationReport, TokenStats
from .estimator import (
    compose_waits,
    detect_slo_violation,
    estimate_decode_time,
    estimate_group_completion,
    estimate_request_completion,
    estimate_waiting_time,
    profile_instance,
)
from .grouping import GroupingConfig, RequestGroup, TokenHistory, assign_incoming, form_request_groups
from .metrics import MetricsReport, compute_metrics, emit_report
from .scheduler import (
    AssignmentProblem,
    SchedulePlan,
    brute_force_oracle,
    build_problem,
    solve_exact,
    solve_heuristic,
    solve_milp,
)
from .sim import EventLog, SimConfig, SimResult, run_simulation
from .workload import Trace, WorkloadConfig, generate_workload, load_trace

__version__ = "0.1.0"
