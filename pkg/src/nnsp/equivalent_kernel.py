"""Equivalent-kernel (large-n, dataset-averaged) predictions and their FWC.

The kernel is decomposed on samples from the input measure (Nystrom):
eigenpairs of K(X_s, X_s) / M give lambda_i and psi_i(x_s) = sqrt(M) v_si,
extended to new points by psi_i(x) = sum_s K(x, x_s) psi_i(x_s) / (lambda_i M).

The EK mean filters the projection of the target onto each mode with
h_i = lambda_i / (lambda_i + sigma2 / n).  The discrepancy operator maps a
function to itself minus that filtered reconstruction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._validation import ShapeError, check_positive
from .contractions import build_cumulant_operator, mean_term
from .kernels import NetworkSpec, closed_form_kernel, deep_kernel_recursion


def sphere_sampler(d, radius=None):
    """Uniform measure on the sphere of radius sqrt(d) (or ``radius``)."""
    r = np.sqrt(d) if radius is None else radius

    def sample(m, rng):
        x = rng.standard_normal((m, d))
        return r * x / np.linalg.norm(x, axis=1, keepdims=True)

    sample.d = d
    return sample


def kernel_evaluator(spec: NetworkSpec, quad_order=40):
    """Callable k(A, B) returning the output kernel between two point sets."""
    if spec.depth == 1:
        wv, bv = spec.layer_weight_var(0), spec.layer_bias_var(0)

        def k(A, B):
            A, B = np.atleast_2d(A), np.atleast_2d(B)
            d = A.shape[1]
            L = wv * (A @ B.T) / d + bv
            dl = wv * np.sum(A * A, axis=1) / d + bv
            dr = wv * np.sum(B * B, axis=1) / d + bv
            return np.asarray(closed_form_kernel(spec.activation, L, spec.readout_var,
                                                 diag_left=dl, diag_right=dr))
        return k

    def k(A, B):
        A, B = np.atleast_2d(A), np.atleast_2d(B)
        J = deep_kernel_recursion(spec, np.vstack([A, B]), quad_order)[-1].values
        return J[: len(A), len(A):]
    return k


@dataclass
class SpectralModel:
    sample_points: np.ndarray
    eigenvalues: np.ndarray
    sample_eigvecs: np.ndarray  # psi_i(x_s), shape (M, r)
    kernel: Callable
    sampler: Callable | None = None
    rank_cut: float = 1e-6

    @property
    def M(self):
        return len(self.sample_points)

    @property
    def rank(self):
        return len(self.eigenvalues)

    def eigenfunctions(self, X):
        """psi_i(x) for each row of X, shape (len(X), r)."""
        Kx = self.kernel(np.atleast_2d(X), self.sample_points)
        return Kx @ self.sample_eigvecs / (self.eigenvalues[None, :] * self.M)

    def project(self, g_values):
        """Empirical-measure coefficients <psi_i, g> from values at the samples."""
        return self.sample_eigvecs.T @ np.asarray(g_values, float) / self.M

    def filter_factors(self, n, sigma2):
        check_positive(sigma2, "sigma2")
        if n < 1:
            raise ValueError("n must be >= 1")
        return self.eigenvalues / (self.eigenvalues + sigma2 / n)

    def orthonormality_error(self):
        G = self.sample_eigvecs.T @ self.sample_eigvecs / self.M
        return float(np.max(np.abs(G - np.eye(self.rank))))

    def mercer_error(self, A, B=None):
        """Relative Frobenius error of sum_i lambda_i psi_i psi_i against K on held-out points."""
        B = A if B is None else B
        K = self.kernel(A, B)
        R = (self.eigenfunctions(A) * self.eigenvalues) @ self.eigenfunctions(B).T
        return float(np.linalg.norm(R - K) / np.linalg.norm(K))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["i", "lambda"])
            for i, lam in enumerate(self.eigenvalues):
                w.writerow([i, repr(float(lam))])


def build_spectrum(kernel, sampler, M=2048, seed=0, rank_cut=1e-6) -> SpectralModel:
    if M < 256:
        raise ValueError("M must be >= 256")
    rng = np.random.Generator(np.random.Philox(seed))
    return spectrum_from_points(kernel, sampler(M, rng), rank_cut, sampler)


def spectrum_from_points(kernel, Xs, rank_cut=1e-6, sampler=None) -> SpectralModel:
    """Nystrom decomposition on given samples of the input measure."""
    Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
    M = len(Xs)
    K = kernel(Xs, Xs)
    K = 0.5 * (K + K.T)
    lam, vec = np.linalg.eigh(K / M)
    lam, vec = lam[::-1], vec[:, ::-1]
    lmax = lam[0]
    if lmax <= 0:
        raise ValueError("kernel matrix has no positive eigenvalue")
    if lam[-1] < -1e-8 * lmax:
        raise ValueError(f"kernel not PSD: eigenvalue {lam[-1]:.3e} below -1e-8 lambda_max")
    keep = lam > rank_cut * lmax
    return SpectralModel(Xs, lam[keep], np.sqrt(M) * vec[:, keep], kernel, sampler, rank_cut)


def _values(g, X):
    return np.asarray(g(X) if callable(g) else g, dtype=float)


def ek_mean(model: SpectralModel, g, n, sigma2, x_star):
    """EK prediction at x_star; g is a callable on point arrays."""
    c = model.project(_values(g, model.sample_points))
    h = model.filter_factors(n, sigma2)
    return model.eigenfunctions(x_star) @ (h * c)


def discrepancy(model: SpectralModel, g, n, sigma2, x):
    return _values(g, np.atleast_2d(x)) - ek_mean(model, g, n, sigma2, x)


class DiscrepancyOperator:
    """delta~ as an operator on functions given by their values at nodes.

    ``apply(values, nodes, x)`` returns f(x) - EK prediction of f at x,
    with the projection done as an empirical average over ``nodes``.
    """

    def __init__(self, model: SpectralModel, n, sigma2):
        self.model = model
        self.h = model.filter_factors(n, sigma2)

    def apply(self, values_at_nodes, nodes, values_at_x, x):
        Pn = self.model.eigenfunctions(nodes)
        coef = Pn.T @ np.asarray(values_at_nodes, float) / len(nodes)
        return np.asarray(values_at_x, float) - self.model.eigenfunctions(x) @ (self.h * coef)


class _LowRankPair:
    """scale * (I / m - Psi diag(h) Psi^T / m^2) without forming the m x m matrix."""

    def __init__(self, Psi, h, scale):
        self.Psi, self.h, self.scale = Psi, h, scale
        self.m = len(Psi)

    def apply(self, Z):
        return self.scale * (Z / self.m - self.Psi @ (self.h[:, None] * (self.Psi.T @ Z)) / self.m ** 2)

    def matrix(self):
        return self.apply(np.eye(self.m))


class ScaledOperator:
    """Wraps a cumulant backend and multiplies U by a constant."""

    def __init__(self, op, c):
        self.op, self.c = op, float(c)

    def fwc_terms(self, y, pair, V):
        return {k: self.c * v for k, v in self.op.fwc_terms(y, pair, V).items()}


def ek_fwc_mean(model: SpectralModel, U_evaluator, g, n, sigma2, x_star, mc_nodes="samples", seed=1,
                return_terms=False):
    """Finite-width correction to the EK mean at each row of x_star.

    U_evaluator is a NetworkSpec (U built for that network) or a callable
    (nodes, x_star) -> cumulant backend.  mc_nodes='samples' (default) runs
    the measure integrals over the spectral sample points, where the sampled
    eigenfunctions are exactly orthonormal, so delta~ annihilates functions
    in the retained span.  An integer draws that many fresh nodes instead;
    the projection error then does not shrink with n and biases the result.
    """
    x_star = np.atleast_2d(x_star)
    if isinstance(mc_nodes, str):
        if mc_nodes != "samples":
            raise ValueError("mc_nodes must be an int or 'samples'")
        nodes = model.sample_points
    else:
        if model.sampler is None:
            raise ValueError("model has no measure sampler for fresh nodes")
        nodes = model.sampler(int(mc_nodes), np.random.Generator(np.random.Philox(seed)))
    m = len(nodes)
    h = model.filter_factors(n, sigma2)
    Psi = model.eigenfunctions(nodes)
    Psi_star = model.eigenfunctions(x_star)
    dg = discrepancy(model, g, n, sigma2, nodes)
    scale = n / sigma2
    y_like = scale * dg / m
    pair = _LowRankPair(Psi, h, scale)
    V = (Psi_star * h) @ Psi.T / m
    if isinstance(U_evaluator, NetworkSpec):
        op = build_cumulant_operator(nodes, x_star, U_evaluator)
    else:
        op = U_evaluator(nodes, x_star)
    terms = op.fwc_terms(y_like, pair, V)
    f = mean_term(terms)
    return (f, terms) if return_terms else f


def ek_report_csv(path, x_ids, ek_vals, ek_fwc_vals, gp_vals=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["id", "ek_mean", "ek_fwc_mean", "gp_mean_avg"])
        for i, k in enumerate(x_ids):
            gv = "" if gp_vals is None else repr(float(gp_vals[i]))
            w.writerow([k, repr(float(ek_vals[i])), repr(float(ek_fwc_vals[i])), gv])


def check_inputs(X, d):
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[1] != d:
        raise ShapeError(f"expected {d} columns")
    return X
