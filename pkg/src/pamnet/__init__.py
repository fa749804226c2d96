"""PAMNet: cycle-aware phase/amplitude modulation for multivariate forecasting."""

from .engine import Parameter, Tape, Tensor, precision
from .model import ModelConfig, ModelParams, forward, init_params
from .training import LossConfig, OptimConfig, fit, grad_check, hybrid_loss

__all__ = [
    "LossConfig",
    "ModelConfig",
    "ModelParams",
    "OptimConfig",
    "Parameter",
    "Tape",
    "Tensor",
    "fit",
    "forward",
    "grad_check",
    "hybrid_loss",
    "init_params",
    "precision",
]
