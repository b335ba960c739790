"""Experiment configs, campaign stages, CSV tables, and the command line."""
from .config import DEFAULT_CONFIG, ExperimentConfig, load_config
from .csvio import read_table, write_table
from .experiments import (alpha_t_transfer_matrix, build_data, certify_campaign, confidence_report,
                          run_campaign, sweep_alpha, train_base)

__all__ = [
    "DEFAULT_CONFIG", "ExperimentConfig", "alpha_t_transfer_matrix", "build_data",
    "certify_campaign", "confidence_report", "load_config", "read_table", "run_campaign",
    "sweep_alpha", "train_base", "write_table",
]
