"""Recurrent-network laboratory: cells, exact BPTT, benchmarks, diagnostics."""

__version__ = "0.1.0"

from .cells import CellConfig, make_cell, param_count
from .engine import Model, TrainSettings, run_trial, select_top_trials
from .errors import DataError, NumericError, UsageError

__all__ = [
    "CellConfig", "make_cell", "param_count",
    "Model", "TrainSettings", "run_trial", "select_top_trials",
    "DataError", "NumericError", "UsageError",
    "__version__",
]
