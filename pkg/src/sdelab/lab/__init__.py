"""Experiment orchestration: configs, the five canned experiments, reports, CLI."""

from .config import EXPERIMENTS, ExperimentConfig, default_config, validate
from .experiments import ExperimentReport, run
from .reporting import csv_hashes, write_report

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "ExperimentReport",
    "default_config",
    "validate",
    "run",
    "write_report",
    "csv_hashes",
]
