"""Adaptive quasi-likelihood estimation for ergodic diffusions observed with additive noise."""
from __future__ import annotations

from .asymptotics import AsymptoticCovariance, InvariantMeasure, information_matrices, sandwich, vech
from .estimate import BayesConfig, EstimationReport, OptimizerConfig, PriorSpec, adaptive_bayes, adaptive_ml
from .harness import ExperimentConfig, McReport, emit_report, pldi_tail_table, run_monte_carlo, run_replication
from .model import (
    DiffusionModel,
    NoiseSpec,
    SamplingScheme,
    TrueParameters,
    build_scheme,
    builtin_ou_model,
    get_model,
    register_model,
)
from .preaverage import local_means
from .quasilik import QuasiLikContext, h1, h2
from .simulate import ObservationSeries, SimSeed, contaminate, simulate_path

__version__ = "0.1.0"
