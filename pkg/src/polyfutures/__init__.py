"""Futures term-structure models driven by two Ornstein-Uhlenbeck factors.

Modules
-------
linalg_expm
    Seven matrix exponential algorithms and a stability/accuracy benchmark.
models
    Schwartz-Smith log-price model and the polynomial diffusion model.
filters
    KF, EKF and UKF with prediction-error log-likelihood.
simulation
    Synthetic factor paths and futures panels; CSV I/O.
estimation
    Maximum-likelihood fitting and RMSE / recovery reports.
cli
    ``polyfutures`` command line.
"""

from .estimation import CaseRegime, EstimationConfig, FilterKind, fit, rmse_report
from .filters import StateSpaceSystem, ekf_run, kf_run, ukf_run
from .linalg_expm import ExpmMethod, expm, run_expm_benchmark
from .models import ModelParams, pd_futures_price, pd_generator_matrix, reference_params
from .simulation import FuturesPanel, Model, SimulationConfig, simulate_panel

__version__ = "0.1.0"

__all__ = [
    "CaseRegime",
    "EstimationConfig",
    "ExpmMethod",
    "FilterKind",
    "FuturesPanel",
    "Model",
    "ModelParams",
    "SimulationConfig",
    "StateSpaceSystem",
    "ekf_run",
    "expm",
    "fit",
    "kf_run",
    "pd_futures_price",
    "pd_generator_matrix",
    "reference_params",
    "rmse_report",
    "run_expm_benchmark",
    "simulate_panel",
    "ukf_run",
]
