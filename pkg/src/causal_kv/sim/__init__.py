"""Deterministic multi-node simulation: virtual clock, lossy links, workload."""

from .events import Scheduler
from .harness import Scenario, SimResult, load_scenario, run_scenario, scenario_from_dict
from .metrics import MetricRecord, percentile, read_csv, render_summary, summarize, write_csv
from .network import DelayModel, LinkConfig, MessageRecord, SimNetwork
from .workload import WorkloadConfig, generate_requests

__all__ = [
    "DelayModel",
    "LinkConfig",
    "MessageRecord",
    "MetricRecord",
    "Scenario",
    "Scheduler",
    "SimNetwork",
    "SimResult",
    "WorkloadConfig",
    "generate_requests",
    "load_scenario",
    "percentile",
    "read_csv",
    "render_summary",
    "run_scenario",
    "scenario_from_dict",
    "summarize",
    "write_csv",
]
