"""Continual learning for conditional GANs with feature-space replay."""

from .config import ExperimentConfig, ReplayConfig, parse_config
from .continual import lambda_schedule, run_stream
from .errors import ConfigError, ContractViolation, NumericFailure

__all__ = [
    "ConfigError",
    "ContractViolation",
    "ExperimentConfig",
    "NumericFailure",
    "ReplayConfig",
    "lambda_schedule",
    "parse_config",
    "run_stream",
]
__version__ = "0.1.0"
