"""Finite-width corrections to neural-network Gaussian process regression.

Kernels and fourth cumulants of wide fully connected nets, GP posteriors with
their leading 1/N corrections, equivalent-kernel limits, and a Langevin
trainer to compare against.
"""

from ._validation import (ConfigError, DivergenceError, FactorizationError, InsufficientDataError, NNSPError,
                          NonConvergentError, ShapeError)
from .contractions import build_cumulant_operator
from .cumulants import FourthCumulant, deep_U_recursion, mc_fourth_cumulant, quadratic_V, relu_mu4_series
from .equivalent_kernel import SpectralModel, build_spectrum, ek_fwc_mean, ek_mean
from .estimators import EquivalentKernelRegressor, LangevinMLPRegressor, NNSPRegressor
from .gp_inference import Posterior, TrainSolve, finite_width_posterior, gp_posterior
from .kernels import InputSet, KernelMatrix, NetworkSpec, deep_kernel_recursion, output_kernel
from .langevin import MLP, TrainProtocol, autocorrelation, ergodicity_check, run_chain

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DivergenceError", "FactorizationError", "InsufficientDataError", "NNSPError",
    "NonConvergentError", "ShapeError",
    "build_cumulant_operator",
    "FourthCumulant", "deep_U_recursion", "mc_fourth_cumulant", "quadratic_V", "relu_mu4_series",
    "SpectralModel", "build_spectrum", "ek_fwc_mean", "ek_mean",
    "EquivalentKernelRegressor", "LangevinMLPRegressor", "NNSPRegressor",
    "Posterior", "TrainSolve", "finite_width_posterior", "gp_posterior",
    "InputSet", "KernelMatrix", "NetworkSpec", "deep_kernel_recursion", "output_kernel",
    "MLP", "TrainProtocol", "autocorrelation", "ergodicity_check", "run_chain",
]
