"""Bayesian history-based subgrid closures for the two-scale Lorenz '96 system."""

__version__ = "0.1.0"

from .dynamics import ClosureModel, HistoryConfig, HistoryWindow, RolloutResult
from .errors import (
    ConfigurationError,
    GradientFailure,
    IntegrationBlowup,
    TrainingDiverged,
)
from .experiment import ExperimentConfig, load_preset
from .hmc import Chain, HmcConfig, HmcSample, PrecisionParams
from .lorenz96 import FullState, ObservationSet, SlowState, TruthConfig
from .network import ClosureParams, MlpArchitecture
from .training import TrainConfig, TrainReport

__all__ = [
    "__version__",
    "Chain",
    "ClosureModel",
    "ClosureParams",
    "ConfigurationError",
    "ExperimentConfig",
    "FullState",
    "GradientFailure",
    "HistoryConfig",
    "HistoryWindow",
    "HmcConfig",
    "HmcSample",
    "IntegrationBlowup",
    "MlpArchitecture",
    "ObservationSet",
    "PrecisionParams",
    "RolloutResult",
    "SlowState",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "TruthConfig",
    "load_preset",
]
