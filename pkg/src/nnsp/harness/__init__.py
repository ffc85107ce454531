"""Experiment orchestration: datasets, sweeps, configuration and the CLI."""

from .config import ExperimentConfig
from .datasets import gen_quadratic_dataset
from .sweeps import SweepResult, run_ek_check, run_ergodicity, run_n_sweep, run_width_sweep

__all__ = ["ExperimentConfig", "gen_quadratic_dataset", "SweepResult", "run_ek_check", "run_ergodicity",
           "run_n_sweep", "run_width_sweep"]
