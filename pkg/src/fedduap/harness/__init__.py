"""Experiment runner, comparison reports and the command line."""

from .config import DEFAULTS, MODES, ConfigError, ExperimentConfig, dump_config, from_dict, load_config
from .report import DigestMismatch, compare_report
from .runner import NAN, ExperimentResult, SummaryReport, run_experiment

__all__ = [
    "DEFAULTS",
    "MODES",
    "NAN",
    "ConfigError",
    "DigestMismatch",
    "ExperimentConfig",
    "ExperimentResult",
    "SummaryReport",
    "compare_report",
    "dump_config",
    "from_dict",
    "load_config",
    "run_experiment",
]
