"""Gaussian expectations of activation products by nested quadrature.

E[prod_k phi(z_k)] for z ~ N(0, C) is computed by writing z = R u with R
the (semidefinite) Cholesky factor and integrating u coordinate by
coordinate.  Smooth activations use Gauss-Hermite nodes.  For kinked ones
(ReLU) each coordinate is split at the kink of its own unit, which sits at
u_j = -m_j / R_jj given the outer coordinates, and each half gets its own
Gauss-Legendre rule.  The innermost coordinate is integrated in closed form
via ``Activation.conditional_mean``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .activations import get_activation

_TAIL = 8.5  # standard normal mass beyond this is ~1e-17


@lru_cache(maxsize=None)
def hermite_rule(order: int):
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


@lru_cache(maxsize=None)
def legendre_rule(order: int):
    return np.polynomial.legendre.leggauss(order)


def psd_cholesky(cov, tol=1e-12):
    """Batched lower Cholesky factor that tolerates semidefinite input.

    Pivots below ``tol`` times the largest diagonal are set to zero (the
    coordinate is then a deterministic function of the earlier ones).
    Returns (factor, n_clipped).
    """
    cov = np.asarray(cov, dtype=float)
    single = cov.ndim == 2
    if single:
        cov = cov[None]
    B, k, _ = cov.shape
    L = np.zeros_like(cov)
    scale = np.maximum(np.max(np.abs(np.diagonal(cov, axis1=1, axis2=2)), axis=1), 1e-300)
    clipped = 0
    for j in range(k):
        d = cov[:, j, j] - np.sum(L[:, j, :j] ** 2, axis=1)
        small = d <= tol * scale
        clipped += int(np.count_nonzero(d < -tol * scale))
        root = np.sqrt(np.where(small, 1.0, d))
        L[:, j, j] = np.where(small, 0.0, root)
        for i in range(j + 1, k):
            off = cov[:, i, j] - np.sum(L[:, i, :j] * L[:, j, :j], axis=1)
            L[:, i, j] = np.where(small, 0.0, off / root)
    return (L[0] if single else L), clipped


def _split_nodes(kink, order):
    """Nodes/weights on [-T, kink] and [kink, T] against the N(0,1) density."""
    x, w = legendre_rule(order)
    c = np.clip(kink, -_TAIL, _TAIL)[..., None]
    lo_half = 0.5 * (c + _TAIL)
    hi_half = 0.5 * (_TAIL - c)
    u = np.concatenate([-_TAIL + lo_half * (x + 1.0), c + hi_half * (x + 1.0)], axis=-1)
    wt = np.concatenate([lo_half * w, hi_half * w], axis=-1)
    wt = wt * np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return u, wt


def gaussian_product_expectation(cov, activation, order=24, chunk=None):
    """E[prod_k phi(z_k)] for each covariance in a (B, k, k) stack.

    Returns (values, n_clipped) where n_clipped counts covariances that
    needed eigen-clipping in the factorization.
    """
    act = get_activation(activation)
    cov = np.asarray(cov, dtype=float)
    single = cov.ndim == 2
    if single:
        cov = cov[None]
    B, k, _ = cov.shape
    per_dim = order if act.smooth else 2 * order
    if chunk is None:
        chunk = max(1, int(4e6 // max(per_dim ** max(k - 1, 0) * k, 1)))
    out = np.empty(B)
    clipped = 0
    for s0 in range(0, B, chunk):
        R, c = psd_cholesky(cov[s0:s0 + chunk])
        clipped += c
        out[s0:s0 + chunk] = _nested(R, act, order)
    return (out[0] if single else out), clipped


def _nested(R, act, order):
    B, k, _ = R.shape
    # u: (B, P, j) coordinates so far; w: (B, P) accumulated weight
    u = np.zeros((B, 1, 0))
    w = np.ones((B, 1))
    for j in range(k - 1):
        m = np.einsum("bpi,bi->bp", u, R[:, j, :j])
        s = R[:, j, j][:, None]
        if act.smooth:
            x, gw = hermite_rule(order)
            uj = np.broadcast_to(x, m.shape + (order,))
            wj = np.broadcast_to(gw, m.shape + (order,))
        else:
            safe = np.where(s > 0, s, 1.0)
            kink = np.where(s > 0, -m / safe, 0.0)
            uj, wj = _split_nodes(kink, order)
        z = m[..., None] + s[..., None] * uj
        w = (w[..., None] * wj * act.fn(z)).reshape(B, -1)
        P = w.shape[1]
        u = np.concatenate(
            [np.repeat(u, uj.shape[-1], axis=1), uj.reshape(B, P, 1)], axis=2
        )
    m = np.einsum("bpi,bi->bp", u, R[:, k - 1, : k - 1])
    s = np.broadcast_to(R[:, k - 1, k - 1][:, None], m.shape)
    return np.sum(w * act.conditional_mean(m, s), axis=1)
