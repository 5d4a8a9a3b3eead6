"""Guided sampling for affine flow models: solvers, gradient engines and verification."""
from . import grads, models, paths, solvers, tasks, verify
from .errors import (
    AccuracyError,
    AdjointInstabilityError,
    ConfigError,
    DivergenceError,
    FlowGuideError,
    InputError,
    ModelError,
    RangeError,
    TrainingError,
    UnsupportedOperation,
)
from .models import AnalyticMixture, GaussianMixtureTarget, MicroMlp, two_mode_target
from .paths import cond_ot, variance_preserving
from .solvers import SolverConfig, solve

__version__ = "0.1.0"
