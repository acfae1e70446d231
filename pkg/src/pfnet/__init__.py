"""Power flow solvers, dataset generation and graph-network surrogates."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .dataset import (
    Dataset, DatasetError, NormStats, PerturbSpec, generate_dataset, load_dataset, save_dataset,
)
from .estimator import GCNRegressor, MLPRegressor, PowerFlowNetRegressor, TrainingError
from .grid import (
    BusKind, CaseError, GridCase, PFGraph, case_to_graph, load_case, parse_matpower, simplify_case,
)
from .nn import PRESETS, ModelConfig, build_model
from .solve import SolverConfig, SolverError, dc_power_flow, evaluate_residual, newton_raphson

__version__ = "0.1.0"

__all__ = [
    "BusKind", "CaseError", "Checkpoint", "CheckpointError", "Dataset", "DatasetError",
    "GCNRegressor", "GridCase", "MLPRegressor", "ModelConfig", "NormStats", "PFGraph",
    "PRESETS", "PerturbSpec", "PowerFlowNetRegressor", "SolverConfig", "SolverError",
    "TrainingError", "build_model", "case_to_graph", "dc_power_flow", "evaluate_residual",
    "generate_dataset", "load_case", "load_checkpoint", "load_dataset", "newton_raphson",
    "parse_matpower", "save_checkpoint", "save_dataset", "simplify_case",
]
