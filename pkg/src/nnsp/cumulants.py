"""Fourth cumulant U of the network output prior.

U is stored in the O(1) convention: the 1/N prefactor is applied later by
the inference code.  For a network whose last hidden layer has
pre-activation kernel L and readout variance readout_var / N,

    U_1234 = readout_var^2 (V_(12)(34) + V_(13)(24) + V_(14)(23)),
    V_(12)(34) = <phi1 phi2 phi3 phi4> - <phi1 phi2><phi3 phi4>.

Three ways of getting V are provided: a closed form for phi(z) = z^2, a
truncated series in the off-diagonal overlaps for ReLU, and Gaussian
quadrature for any registered activation.  A Monte Carlo estimator over
prior weight draws serves as the independent oracle.
"""

from __future__ import annotations

import math
import warnings
import zlib
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations

import numpy as np

from ._validation import NonConvergentError, ShapeError, check_positive
from .activations import get_activation
from .kernels import NetworkSpec, deep_kernel_recursion, gaussian_layer_map, linear_kernel
from .quadrature import gaussian_product_expectation

# the three ways of splitting four slots into two pairs
PAIRINGS = ((0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2))
OFFDIAG = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


# ----------------------------------------------------------------------------
# quadratic activation


def quadratic_V(L4):
    """Connected moment V_(12)(34) for phi(z) = z^2, closed-form polynomial in L.

    Accepts a single 4x4 block or a stack (..., 4, 4).
    """
    L = np.asarray(L4, dtype=float)
    if L.shape[-2:] != (4, 4):
        raise ShapeError(f"expected 4x4 block(s), got {L.shape}")
    l = lambda i, j: L[..., i - 1, j - 1]  # noqa: E731  1-based like the formula
    two = (
        l(1, 1) * l(3, 3) * l(2, 4) ** 2
        + l(1, 1) * l(4, 4) * l(2, 3) ** 2
        + l(2, 2) * l(3, 3) * l(1, 4) ** 2
        + l(2, 2) * l(4, 4) * l(1, 3) ** 2
    )
    four = l(1, 3) ** 2 * l(2, 4) ** 2 + l(1, 4) ** 2 * l(2, 3) ** 2
    eight = (
        l(1, 1) * l(2, 3) * l(3, 4) * l(2, 4)
        + l(2, 2) * l(3, 4) * l(1, 4) * l(1, 3)
        + l(3, 3) * l(1, 2) * l(1, 4) * l(2, 4)
        + l(4, 4) * l(1, 2) * l(1, 3) * l(2, 3)
    )
    sixteen = (
        l(1, 2) * l(1, 3) * l(2, 4) * l(3, 4)
        + l(1, 2) * l(1, 4) * l(2, 3) * l(3, 4)
        + l(1, 3) * l(1, 4) * l(2, 3) * l(2, 4)
    )
    return 2.0 * two + 4.0 * four + 8.0 * eight + 16.0 * sixteen


def _permute_block(L, order):
    idx = np.asarray(order)
    return L[..., idx[:, None], idx[None, :]]


# ----------------------------------------------------------------------------
# ReLU series


@dataclass(frozen=True)
class SeriesTruncation:
    t_max: int = 8
    offdiag_threshold: float = 0.6

    def __post_init__(self):
        if self.t_max < 0:
            raise ValueError("t_max must be >= 0")
        if not 0.0 < self.offdiag_threshold < 1.0:
            raise ValueError("offdiag_threshold must lie in (0, 1)")


def relu_g(s: int, printed: bool = False) -> complex:
    """One-dimensional coefficient G_s for the ReLU series.

    G_s = (-i)^-s (2 pi)^-1/2 int_0^inf z (d/dz)^s exp(-z^2/2) dz.  For even
    s = 2k + 2 this evaluates to -(2k)! / (sqrt(2 pi) 2^k k!).  The printed
    closed form carries an extra alternating sign (-1)^k with the opposite
    overall sign; ``printed=True`` returns that variant for comparison.
    """
    if s < 0:
        raise ValueError("s must be non-negative")
    if s == 0:
        return complex(1.0 / math.sqrt(2.0 * math.pi))
    if s == 1:
        return -0.5j
    if s % 2 == 1:
        return 0j
    k = (s - 2) // 2
    mag = math.factorial(2 * k) / (math.sqrt(2.0 * math.pi) * 2 ** k * math.factorial(k))
    return complex((-1) ** k * mag if printed else -mag)


def g_table(s_max: int, printed: bool = False) -> dict:
    return {s: relu_g(s, printed) for s in range(s_max + 1)}


def relu_g_integral(s: int, nodes: int = 200) -> complex:
    """G_s by direct quadrature of its defining integral (independent check)."""
    from numpy.polynomial.hermite_e import HermiteE

    x, w = np.polynomial.legendre.leggauss(nodes)
    z = 6.0 * (x + 1.0)  # [0, 12]
    wz = 6.0 * w
    # (d/dz)^s exp(-z^2/2) = (-1)^s He_s(z) exp(-z^2/2)
    he = HermiteE.basis(s)(z)
    integral = np.sum(wz * z * (-1) ** s * he * np.exp(-0.5 * z * z))
    return complex(integral / ((-1j) ** s * math.sqrt(2.0 * math.pi)))


@lru_cache(maxsize=None)
def _series_terms(t_max: int):
    """Exponent six-tuples (l, m, n, p, q, r) of total order <= t_max and their coefficients."""
    exps = []
    for total in range(t_max + 1):
        for l in range(total + 1):
            for m in range(total - l + 1):
                for n in range(total - l - m + 1):
                    for p in range(total - l - m - n + 1):
                        for q in range(total - l - m - n - p + 1):
                            r = total - l - m - n - p - q
                            exps.append((l, m, n, p, q, r))
    exps = np.array(exps, dtype=int)
    g = g_table(3 * t_max + 1)
    coef = np.empty(len(exps), dtype=complex)
    for t, (l, m, n, p, q, r) in enumerate(exps):
        num = g[l + m + n] * g[l + p + q] * g[m + p + r] * g[n + q + r]
        den = math.prod(math.factorial(e) for e in (l, m, n, p, q, r))
        coef[t] = (-1) ** (l + m + n + p + q + r) * num / den
    if np.max(np.abs(coef.imag)) >= 1e-12:
        raise ArithmeticError("ReLU series coefficients have a non-negligible imaginary part")
    keep = coef.real != 0.0
    return exps[keep], coef.real[keep]


def _unit_blocks(L):
    dg = np.sqrt(np.diagonal(L, axis1=-2, axis2=-1))
    rho = L / (dg[..., :, None] * dg[..., None, :])
    return rho, np.prod(dg, axis=-1)


def relu_mu4_series_batch(L4s, trunc: SeriesTruncation = SeriesTruncation()):
    """Vectorized series for <relu(z1)..relu(z4)>.

    Returns (values, ok) where ok flags blocks whose correlations all lie
    below the threshold; values at non-ok blocks are NaN.
    """
    L = np.asarray(L4s, dtype=float).reshape(-1, 4, 4)
    rho, scale = _unit_blocks(L)
    off = np.stack([rho[:, i, j] for i, j in OFFDIAG], axis=1)
    ok = np.all(np.abs(off) < trunc.offdiag_threshold, axis=1)
    exps, coef = _series_terms(trunc.t_max)
    out = np.full(len(L), np.nan)
    idx = np.flatnonzero(ok)
    for s0 in range(0, len(idx), 4096):
        sel = idx[s0:s0 + 4096]
        pw = off[sel][:, :, None] ** np.arange(trunc.t_max + 1)[None, None, :]
        mono = np.ones((len(sel), len(exps)))
        for j in range(6):
            mono *= pw[:, j, exps[:, j]]
        out[sel] = mono @ coef
    return out * scale, ok


def relu_mu4_series(L4, trunc: SeriesTruncation = SeriesTruncation()) -> float:
    """Fourth moment of four correlated ReLU units by the off-diagonal series."""
    L = np.asarray(L4, dtype=float)
    if L.shape != (4, 4):
        raise ShapeError("expected a single 4x4 block")
    if np.any(np.diag(L) <= 0):
        raise ValueError("diagonal must be strictly positive")
    rho, _ = _unit_blocks(L)
    for i, j in OFFDIAG:
        if abs(rho[i, j]) >= trunc.offdiag_threshold:
            raise NonConvergentError(
                f"|L_{i + 1}{j + 1}| = {abs(rho[i, j]):.3f} >= {trunc.offdiag_threshold}",
                pair=(i, j),
                value=float(rho[i, j]),
            )
    vals, _ = relu_mu4_series_batch(L[None], trunc)
    return float(vals[0])


# ----------------------------------------------------------------------------
# Monte Carlo oracles


def mc_moment4(L4, activation, samples=10**6, seed=0, chunk=10**6):
    """Plain Monte Carlo of <phi(z1)..phi(z4)> for z ~ N(0, L4); returns (mean, se)."""
    act = get_activation(activation)
    L = np.asarray(L4, dtype=float)
    w, V = np.linalg.eigh(L)
    R = V * np.sqrt(np.clip(w, 0.0, None))
    rng = np.random.Generator(np.random.Philox(seed))
    s1 = s2 = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        z = rng.standard_normal((m, 4)) @ R.T
        p = np.prod(act.fn(z), axis=1)
        s1 += p.sum()
        s2 += (p * p).sum()
        done += m
    mean = s1 / samples
    var = (s2 / samples - mean * mean) * samples / (samples - 1)
    return mean, math.sqrt(max(var, 0.0) / samples)


def _cumulant_from_sums(n, p4, p2):
    """O(1) fourth cumulant (without readout factor) from raw sums.

    Products of two means use the unbiased pair estimator
    (n a_bar b_bar - mean(ab)) / (n - 1), with mean(ab) = mean(p4).
    """
    m4 = p4 / n
    total = 3.0 * m4
    for a, b in ((0, 1), (2, 3), (4, 5)):
        total -= (n * (p2[a] / n) * (p2[b] / n) - m4) / (n - 1)
    return total


def mc_fourth_cumulant(spec: NetworkSpec, points, samples=10**6, seed=0, blocks=100, chunk=250_000):
    """Monte Carlo estimate of the O(1) fourth cumulant at four inputs.

    For one hidden layer the first-layer weights are drawn from the prior.
    For deeper nets the last hidden pre-activations are drawn from the
    leading-order Gaussian with the recursed kernel.  Returns
    (estimate, jackknife standard error).
    """
    if samples < 10**5:
        raise ValueError("mc_fourth_cumulant needs at least 1e5 samples")
    X = np.asarray(points, dtype=float)
    if X.shape[0] != 4:
        raise ShapeError("need exactly four input points")
    act = get_activation(spec.activation)
    d = X.shape[1]
    rng = np.random.Generator(np.random.Philox(seed))
    if spec.depth == 1:
        sw = math.sqrt(spec.layer_weight_var(0) / d)
        bias = spec.layer_bias_var(0)

        def draw(m):
            z = (rng.standard_normal((m, d)) * sw) @ X.T
            if bias:
                z += math.sqrt(bias) * rng.standard_normal((m, 1))
            return z
    else:
        K = deep_kernel_recursion(spec, X)[-2].values
        w, V = np.linalg.eigh(K)
        R = V * np.sqrt(np.clip(w, 0.0, None))

        def draw(m):
            return rng.standard_normal((m, 4)) @ R.T

    per_block = max(1, samples // blocks)
    stats = np.zeros((blocks, 8))  # count, p4, p12, p34, p13, p24, p14, p23
    for b in range(blocks):
        left = per_block
        while left > 0:
            m = min(chunk, left)
            phi = act.fn(draw(m))
            stats[b, 0] += m
            stats[b, 1] += np.sum(phi[:, 0] * phi[:, 1] * phi[:, 2] * phi[:, 3])
            for k, (i, j) in enumerate(((0, 1), (2, 3), (0, 2), (1, 3), (0, 3), (1, 2))):
                stats[b, 2 + k] += np.sum(phi[:, i] * phi[:, j])
            left -= m
    scale = spec.readout_var ** 2
    tot = stats.sum(axis=0)
    est = scale * _cumulant_from_sums(tot[0], tot[1], tot[2:])
    loo = tot[None, :] - stats
    jk = scale * np.array([_cumulant_from_sums(r[0], r[1], r[2:]) for r in loo])
    se = math.sqrt((blocks - 1) / blocks * np.sum((jk - jk.mean()) ** 2))
    return float(est), float(se)


# ----------------------------------------------------------------------------
# V providers: map stacks of 4x4 pre-activation blocks to the three V's


class QuadraticProvider:
    name = "quadratic"

    def connected(self, L4s):
        L = np.asarray(L4s, dtype=float).reshape(-1, 4, 4)
        return np.stack([quadratic_V(_permute_block(L, p)) for p in PAIRINGS], axis=1)


def _pair_moments(L, pair_fn):
    """<phi_a phi_b> for the six slot pairs of each block, shape (B, 4, 4)."""
    P = np.empty_like(L)
    for i in range(4):
        for j in range(i, 4):
            P[:, i, j] = P[:, j, i] = pair_fn(L[:, i, i], L[:, j, j], L[:, i, j])
    return P


def _relu_pair(a, b, c):
    norm = np.sqrt(a * b)
    cos = np.clip(c / norm, -1.0, 1.0)
    th = np.arccos(cos)
    return norm / (2.0 * np.pi) * (np.sin(th) + (np.pi - th) * cos)


def _v_from_mu4(mu4, P):
    out = np.empty((len(mu4), 3))
    for k, (a, b, c, d) in enumerate(PAIRINGS):
        out[:, k] = mu4 - P[:, a, b] * P[:, c, d]
    return out


class ReluSeriesProvider:
    """ReLU V's from the overlap series.

    Blocks with a correlation at or above the threshold (which includes
    every block with a repeated point) are handled by ``fallback``:
    'mc' (Monte Carlo, default), 'quadrature', or 'drop' (entry set to 0).
    """

    name = "relu-series"

    def __init__(self, trunc=SeriesTruncation(), fallback="mc", mc_samples=10**5, seed=0, quad_order=16):
        if fallback not in ("mc", "quadrature", "drop"):
            raise ValueError("fallback must be 'mc', 'quadrature' or 'drop'")
        self.trunc = trunc
        self.fallback = fallback
        self.mc_samples = int(mc_samples)
        self.seed = int(seed)
        self.quad_order = quad_order
        self.n_fallback = 0

    def connected(self, L4s):
        L = np.asarray(L4s, dtype=float).reshape(-1, 4, 4)
        mu4, ok = relu_mu4_series_batch(L, self.trunc)
        bad = np.flatnonzero(~ok)
        self.n_fallback += len(bad)
        if len(bad) and self.fallback == "mc":
            for b in bad:
                key = zlib.crc32(np.round(L[b], 12).tobytes())
                mu4[b], _ = mc_moment4(L[b], "relu", self.mc_samples, seed=(self.seed, key))
        elif len(bad) and self.fallback == "quadrature":
            mu4[bad], _ = gaussian_product_expectation(L[bad], "relu", self.quad_order)
        V = _v_from_mu4(mu4, _pair_moments(L, _relu_pair))
        if len(bad) and self.fallback == "drop":
            V[bad] = 0.0
        return V


class QuadratureProvider:
    """V's for any registered activation by Gaussian quadrature."""

    def __init__(self, activation, quad_order=16, pair_order=40):
        self.activation = get_activation(activation)
        self.name = f"quadrature-{self.activation.name}"
        self.quad_order = quad_order
        self.pair_order = pair_order

    def connected(self, L4s):
        L = np.asarray(L4s, dtype=float).reshape(-1, 4, 4)
        mu4, _ = gaussian_product_expectation(L, self.activation, self.quad_order)
        act, order = self.activation, self.pair_order

        def pair(a, b, c):
            cov = np.empty((len(a), 2, 2))
            cov[:, 0, 0], cov[:, 1, 1] = a, b
            cov[:, 0, 1] = cov[:, 1, 0] = c
            return gaussian_product_expectation(cov, act, order)[0]

        return _v_from_mu4(mu4, _pair_moments(L, pair))


def default_provider(activation, **kw):
    name = get_activation(activation).name
    if name == "quadratic":
        return QuadraticProvider()
    if name == "relu":
        return ReluSeriesProvider(**kw)
    return QuadratureProvider(name, **{k: v for k, v in kw.items() if k in ("quad_order", "pair_order")})


def assemble_U(provider, K_prev, readout_var, indices) -> float:
    """One entry of U (O(1) convention) from the previous-layer kernel."""
    check_positive(readout_var, "readout_var")
    idx = np.asarray(indices, dtype=int)
    if idx.shape != (4,):
        raise ShapeError("need four point indices")
    K = np.asarray(K_prev, dtype=float)
    L4 = K[np.ix_(idx, idx)]
    return float(readout_var ** 2 * provider.connected(L4[None]).sum())


def U_entries(provider, K_prev, readout_var, quads):
    """Vectorized assemble_U over a (Q, 4) array of index quadruples."""
    K = np.asarray(K_prev, dtype=float)
    q = np.asarray(quads, dtype=int)
    blocks = K[q[:, :, None], q[:, None, :]]
    return readout_var ** 2 * provider.connected(blocks).sum(axis=1)


# ----------------------------------------------------------------------------
# packed symmetric storage


def n_sorted(n, r):
    """Number of non-decreasing r-tuples over n symbols."""
    return math.comb(n + r - 1, r)


def sorted_tuples(n, r):
    """All non-decreasing r-tuples over range(n), in colex order (largest index slowest)."""
    if r == 1:
        return np.arange(n)[:, None]
    prev = sorted_tuples(n, r - 1)
    parts = []
    for last in range(n):
        head = prev[: n_sorted(last + 1, r - 1)]
        parts.append(np.column_stack([head, np.full(len(head), last)]))
    return np.concatenate(parts) if parts else np.zeros((0, r), dtype=int)


def packed_rank(tuples):
    """Colex rank of sorted tuples, matching ``sorted_tuples`` ordering."""
    t = np.sort(np.asarray(tuples, dtype=np.int64), axis=-1)
    r = t.shape[-1]
    rank = np.zeros(t.shape[:-1], dtype=np.int64)
    for k in range(r):
        x = t[..., k] + k
        num = np.ones_like(x)
        for j in range(k + 1):
            num = num * (x - j)
        rank += num // math.factorial(k + 1)
    return rank


def multiplicity_factor(tuples):
    """prod_i m_i! over the repeated values of each sorted tuple."""
    t = np.asarray(tuples)
    r = t.shape[-1]
    f = np.ones(t.shape[:-1])
    run = np.ones(t.shape[:-1])
    for k in range(1, r):
        same = t[..., k] == t[..., k - 1]
        run = np.where(same, run + 1, 1)
        f = f * np.where(same, run, 1)
    return f


class FourthCumulant:
    """Totally symmetric rank-4 tensor stored as unique sorted quadruples.

    Values follow the O(1) convention.  ``index_set`` lists the point ids
    (train points first, then test points, when built for inference).
    """

    mode = "materialized"
    scale_convention = "O(1)"

    def __init__(self, values, n_points, index_set=None):
        values = np.asarray(values, dtype=float)
        if values.shape != (n_sorted(n_points, 4),):
            raise ShapeError("packed values have the wrong length")
        self.values = values
        self.n_points = int(n_points)
        self.index_set = list(range(n_points)) if index_set is None else list(index_set)

    @classmethod
    def from_provider(cls, provider, K_prev, readout_var, index_set=None, chunk=200_000):
        K = np.asarray(K_prev, dtype=float)
        n = K.shape[0]
        quads = sorted_tuples(n, 4)
        vals = np.empty(len(quads))
        for s0 in range(0, len(quads), chunk):
            vals[s0:s0 + chunk] = U_entries(provider, K, readout_var, quads[s0:s0 + chunk])
        return cls(vals, n, index_set)

    def __call__(self, a, b, c, d):
        return self.values[packed_rank(np.stack(np.broadcast_arrays(a, b, c, d), axis=-1))]

    def dense(self):
        n = self.n_points
        if n > 60:
            raise MemoryError("dense view is meant for small tensors only")
        idx = np.indices((n,) * 4).reshape(4, -1).T
        return self.values[packed_rank(idx)].reshape((n,) * 4)

    def scaled(self, c):
        return FourthCumulant(c * self.values, self.n_points, self.index_set)


def deep_U_recursion(spec: NetworkSpec, inputs, quad_order=16) -> FourthCumulant:
    """U over all input quadruples by quadrature over the last hidden layer.

    The last hidden pre-activation kernel comes from the leading-order
    recursion; the four-point Gaussian average is evaluated by nested
    quadrature and the three pairing products are subtracted.
    """
    X = np.asarray(inputs.points if hasattr(inputs, "points") else inputs, dtype=float)
    if spec.depth == 1:
        K = linear_kernel(X, spec.layer_weight_var(0), spec.layer_bias_var(0)).values
    else:
        K = deep_kernel_recursion(spec, X)[-2].values
    w = np.linalg.eigvalsh(K)
    if w[0] < -1e-12 * max(w[-1], 1e-300):
        warnings.warn("previous-layer kernel not PSD; eigenvalues clipped", RuntimeWarning)
    pair, _ = gaussian_layer_map(K, spec.activation, quad_order=max(40, quad_order))
    quads = sorted_tuples(X.shape[0], 4)
    blocks = K[quads[:, :, None], quads[:, None, :]]
    mu4, _ = gaussian_product_expectation(blocks, spec.activation, order=quad_order)
    vals = 3.0 * mu4
    for a, b, c, d in PAIRINGS:
        vals -= pair[quads[:, a], quads[:, b]] * pair[quads[:, c], quads[:, d]]
    return FourthCumulant(spec.readout_var ** 2 * vals, X.shape[0])


def symmetry_spot_check(U_fn, n_points, n_checks=50, seed=0, rtol=1e-12):
    """Largest relative deviation of U over the 24 permutations of random quadruples."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_checks):
        q = rng.integers(0, n_points, size=4)
        vals = np.array([U_fn(*[q[i] for i in p]) for p in permutations(range(4))], dtype=float)
        scale = max(np.max(np.abs(vals)), 1e-300)
        worst = max(worst, float(np.ptp(vals) / scale))
    return worst
