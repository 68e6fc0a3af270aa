"""Calibration-driven structured pruning of small transformer encoders.

Neurons and attention heads are selected with column-pivoted QR; the
interpolation matrix of the resulting interpolative decomposition is folded
into the next weight matrix, so no fine-tuning is needed.
"""
from .allocate import ErrorTables, PruningPlan, allocate_plan, build_error_tables, depth_weight
from .errors import (
    FormatError,
    InfeasibleBudgetError,
    PipelineError,
    SingularFactorError,
    StatPruneError,
    TruncatedFileError,
    ValidationError,
)
from .formats import CalibrationSet, load_calib, load_model, save_calib, save_model
from .interpolative import IDResult, error_curve, interpolative_decomposition
from .linalg import QrFactorization, cpqr, least_squares
from .model import TransformerModel, count_flops, forward_with_capture
from .pipeline import PipelineConfig, evaluate, prune_model, run_pipeline
from .prune import SketchConfig, prune_attention, prune_ffn
from .synthetic import gen_synthetic

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet", "ErrorTables", "FormatError", "IDResult", "InfeasibleBudgetError",
    "PipelineConfig", "PipelineError", "PruningPlan", "QrFactorization", "SingularFactorError",
    "SketchConfig", "StatPruneError", "TransformerModel", "TruncatedFileError", "ValidationError",
    "allocate_plan", "build_error_tables", "count_flops", "cpqr", "depth_weight", "error_curve",
    "evaluate", "forward_with_capture", "gen_synthetic", "interpolative_decomposition",
    "least_squares", "load_calib", "load_model", "prune_attention", "prune_ffn", "prune_model",
    "run_pipeline", "save_calib", "save_model",
]
