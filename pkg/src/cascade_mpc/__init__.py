"""Certified stochastic MPC for cascaded hydropower with renewable balancing."""

from .admm import AdmmConfig, run_admm, split_consensus
from .aggregation import ClusterMap, build_aggregated_model, build_tail_map
from .bounds import AlgoConfig, mpc_step, project_upper_bound, run_algorithm1
from .model import (CascadeInstance, ControlAction, InputError, MarketAndObjective, PlantParams,
                    RollingState, ScenarioSet, build_full_model, load_instance,
                    reference_instance)
from .qp import QpProblem, QpSolution, QpStatus, solve
from .scenarios import GeneratorSpec, ProcessSpec, generate_scenarios, realize
from .simulate import SimConfig, benchmark, simulate

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "AlgoConfig", "CascadeInstance", "ClusterMap", "ControlAction",
    "GeneratorSpec", "InputError", "MarketAndObjective", "PlantParams", "ProcessSpec",
    "QpProblem", "QpSolution", "QpStatus", "RollingState", "ScenarioSet", "SimConfig",
    "benchmark", "build_aggregated_model", "build_full_model", "build_tail_map",
    "generate_scenarios", "load_instance", "mpc_step", "project_upper_bound", "realize",
    "reference_instance", "run_admm", "run_algorithm1", "simulate", "solve", "split_consensus",
]
