"""Log-log slope fits and relative MSEs between prediction sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._validation import InsufficientDataError
from .datasets import philox


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    slope_se: float
    n_points: int
    x_min: float
    x_max: float

    def predict(self, x):
        return 10.0 ** (self.intercept + self.slope * np.log10(x))


def fit_slope(x, y, n_boot=200, seed=0) -> SlopeFit:
    """OLS of log10 y on log10 x; standard error from a pairs bootstrap.

    Resamples with fewer than two distinct x values are redrawn.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(np.unique(x)) < 2:
        raise InsufficientDataError("need at least two distinct points for a slope")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log10(x), np.log10(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    rng = philox(seed, 7)
    boots = []
    while len(boots) < n_boot:
        idx = rng.integers(0, len(x), len(x))
        if len(np.unique(lx[idx])) < 2:
            continue
        boots.append(np.polyfit(lx[idx], ly[idx], 1)[0])
    se = float(np.std(boots, ddof=1)) if n_boot > 1 else float("nan")
    return SlopeFit(float(slope), float(intercept), se, len(x), float(x.min()), float(x.max()))


def top_fraction(values, fraction=0.5):
    """The largest ceil(fraction * len) entries of a sorted grid (at least two)."""
    vals = sorted(values)
    k = max(2, int(np.ceil(fraction * len(vals))))
    return vals[-k:]


@dataclass
class MSEEstimate:
    raw: float
    bias: float  # expected contribution of finite sampling of the DNN mean
    se: float  # jackknife standard error of the bias-subtracted value

    @property
    def subtracted(self):
        return self.raw - self.bias


def _mse_parts(reference, seed_means):
    S = seed_means.shape[0]
    mean = seed_means.mean(axis=0)
    raw = np.mean((reference - mean) ** 2)
    bias = np.mean(seed_means.var(axis=0, ddof=1) / S)
    return raw, bias


def relative_mse(reference, seed_means, norm=None) -> MSEEstimate:
    """Mean squared gap between a reference and the seed-pooled DNN mean.

    Normalized by the mean squared pooled output unless ``norm`` is given.
    The bias term is the across-seed variance of the pooled mean; the
    standard error comes from a leave-one-seed-out jackknife.
    """
    seed_means = np.asarray(seed_means, dtype=float)
    reference = np.asarray(reference, dtype=float)
    S = seed_means.shape[0]
    if S < 3:
        raise InsufficientDataError("need at least three seeds for the bias estimate")
    if norm is None:
        norm = float(np.mean(seed_means.mean(axis=0) ** 2))
    raw, bias = _mse_parts(reference, seed_means)
    loo = []
    for s in range(S):
        r, b = _mse_parts(reference, np.delete(seed_means, s, axis=0))
        loo.append(r - b)
    loo = np.asarray(loo)
    se = float(np.sqrt((S - 1) / S * np.sum((loo - loo.mean()) ** 2)))
    return MSEEstimate(raw / norm, bias / norm, se / norm)
