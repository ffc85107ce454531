"""Error types and small input checks shared across the package."""

from __future__ import annotations

import numpy as np


class NNSPError(Exception):
    """Base class for all structured errors raised by the library."""


class ShapeError(NNSPError, ValueError):
    pass


class FactorizationError(NNSPError, np.linalg.LinAlgError):
    pass


class NonConvergentError(NNSPError, ArithmeticError):
    """Series expansion requested outside its convergence region."""

    def __init__(self, message, pair=None, value=None):
        super().__init__(message)
        self.pair = pair
        self.value = value


class DivergenceError(NNSPError, FloatingPointError):
    """Non-finite weights detected during Langevin training."""

    def __init__(self, message, epoch=None, meta=None):
        super().__init__(message)
        self.epoch = epoch
        self.meta = meta or {}


class InsufficientDataError(NNSPError, ValueError):
    pass


class ConfigError(NNSPError, ValueError):
    pass


def as_matrix(a, name="array", ncols=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and ncols is not None:
        a = a.reshape(-1, ncols)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if ncols is not None and a.shape[1] != ncols:
        raise ShapeError(f"{name} must have {ncols} columns, got {a.shape[1]}")
    return a


def as_square(a, name="matrix") -> np.ndarray:
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def check_positive(value, name):
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be finite and non-negative, got {value!r}")
    return float(value)


def check_finite(a, name="array"):
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a
