"""Copula-linked parallel ICA for two-modality data fusion."""

__version__ = "0.1.0"

from .copula_model import CopulaSpec, MarginalModel, joint_nll, nll_gradient
from .simulation import SimSpec, simulate
from .solver import FitConfig, FitResult, fit

__all__ = [
    "CopulaSpec",
    "MarginalModel",
    "joint_nll",
    "nll_gradient",
    "SimSpec",
    "simulate",
    "FitConfig",
    "FitResult",
    "fit",
]
