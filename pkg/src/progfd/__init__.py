"""Progress-based fault detection and health-aware task allocation for robot teams."""

__version__ = "0.1.0"

from .allocator import (
    AllocationInfeasible,
    HealthPolicy,
    TeamSpec,
    build_allocation_qp,
    solve_allocation,
)
from .config import ConfigError, load_config, parse_config, scenario_path
from .detector import DetectorConfig, DetectorState, HealthLabel, detector_step
from .estimator import KfModel, KfState, kf_init, kf_predict, kf_update
from .progress import Progress, composite_progress, spatial_progress, workload_progress
from .qp import QpProblem, QpSolution, QpStatus, solve_qp
from .simulator import FaultKind, FaultSpec, RunLog, ScenarioConfig, run_scenario

__all__ = [
    "AllocationInfeasible", "ConfigError", "DetectorConfig", "DetectorState", "FaultKind",
    "FaultSpec", "HealthLabel", "HealthPolicy", "KfModel", "KfState", "Progress", "QpProblem",
    "QpSolution", "QpStatus", "RunLog", "ScenarioConfig", "TeamSpec", "build_allocation_qp",
    "composite_progress", "detector_step", "kf_init", "kf_predict", "kf_update", "load_config",
    "parse_config", "run_scenario", "scenario_path", "solve_allocation", "solve_qp",
    "spatial_progress", "workload_progress",
]
