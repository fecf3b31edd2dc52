"""Debiased inference on nonparametric endogenous marginal effects with high-dimensional controls."""

from ._validation import InfeasibleError, NpivError, NumericalError, StageError, ValidationError
from .band import BandConfig, BandResult, MarginalEffectBand, run_band, run_full_sample, run_split_sample
from .penreg import PartialLasso
from .simkit import DgpSpec, generate, run_monte_carlo
from .splines import BSplineFeatures
from .stage import Dataset

__all__ = [
    "BandConfig",
    "BandResult",
    "BSplineFeatures",
    "Dataset",
    "DgpSpec",
    "InfeasibleError",
    "MarginalEffectBand",
    "NpivError",
    "NumericalError",
    "PartialLasso",
    "StageError",
    "ValidationError",
    "generate",
    "run_band",
    "run_full_sample",
    "run_monte_carlo",
    "run_split_sample",
]

__version__ = "0.1.0"
