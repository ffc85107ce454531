"""GP posterior regression and its leading 1/N finite-width corrections.

With K~ = K + sigma2 I, y~ = K~^-1 y and v = K~^-1 k_* the GP gives

    mean = y . v,    var = k_** - k_* . v.

The corrections use the fourth cumulant U (O(1) convention):

    U~*_abc  = U*_abc - U_abcd v_d
    U~**_ab  = U**_ab - (U*_abc + U~*_abc) v_c
    f_U      = (1/6) U~*_abc (y~_a y~_b y~_c - 3 K~^-1_ab y~_c)
    <f^2>_U  = (1/2) U~**_ab (y~_a y~_b - K~^-1_ab)
    Sigma_U  = <f^2>_U - 2 mean f_U

and the finite-width prediction is mean + f_U / N, var + Sigma_U / N.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ._validation import FactorizationError, ShapeError, as_square, check_positive
from .contractions import mean_term, second_moment_term

DEFAULT_JITTER = 1e-10


class TrainSolve:
    """Cholesky factorization of K~ = K + sigma2 I with jitter escalation.

    sigma2 > 0 already makes K~ positive definite, so the first attempt uses
    no jitter.  On failure jitter starts at ``jitter`` x max diagonal and
    grows tenfold until the factorization succeeds or exceeds 1e-6 x trace / m.
    """

    def __init__(self, K_train, y, sigma2, jitter=DEFAULT_JITTER):
        K = as_square(K_train, "K_train")
        sigma2 = check_positive(sigma2, "sigma2")
        y = np.asarray(y, dtype=float)
        if y.shape[0] != K.shape[0]:
            raise ShapeError(f"y has {y.shape[0]} rows, K has {K.shape[0]}")
        m = K.shape[0]
        Kt = 0.5 * (K + K.T) + sigma2 * np.eye(m)
        scale = max(float(np.max(np.diag(Kt))), 1e-300)
        limit = 1e-6 * float(np.trace(Kt)) / m
        eps = 0.0
        while True:
            try:
                self._cho = cho_factor(Kt + eps * np.eye(m), lower=True, check_finite=True)
                break
            except np.linalg.LinAlgError:
                eps = max(eps * 10.0, jitter * scale, 1e-300)
                if eps > limit:
                    raise FactorizationError(
                        f"K + sigma2 I not positive definite even with jitter {eps:.2e}"
                    ) from None
        self.jitter_used = eps
        self.K_tilde = Kt + eps * np.eye(m)
        self.sigma2 = sigma2
        self.y = y
        self.y_tilde = self.solve(y)
        self._inverse = None

    @property
    def n(self):
        return self.K_tilde.shape[0]

    def solve(self, Z):
        return cho_solve(self._cho, Z, check_finite=False)

    # pair-operator protocol used by the contraction backends
    def apply(self, Z):
        return self.solve(Z)

    def matrix(self):
        if self._inverse is None:
            inv = self.solve(np.eye(self.n))
            self._inverse = 0.5 * (inv + inv.T)
        return self._inverse

    def reconstruction_error(self):
        r = self.K_tilde @ self.y_tilde - self.y
        return float(np.linalg.norm(r) / max(np.linalg.norm(self.y), 1e-300))


def _kstar(K_star, n):
    Ks = np.asarray(K_star, dtype=float)
    if Ks.ndim == 1:
        Ks = Ks[None, :]
    if Ks.shape[1] != n:
        raise ShapeError(f"K_star must be (n_test, {n}), got {Ks.shape}")
    return Ks


def _kss_diag(K_star_star, T):
    Kss = np.asarray(K_star_star, dtype=float)
    if Kss.ndim == 2:
        Kss = np.diag(Kss)
    Kss = np.broadcast_to(Kss, (T,))
    return Kss


def gp_posterior(K_train, K_star, K_star_star, y, sigma2, solve: TrainSolve | None = None):
    """Posterior mean and variance at each test point.

    K_star is (n_test, n_train); K_star_star the test diagonal (or full block).
    """
    solve = solve or TrainSolve(K_train, y, sigma2)
    Ks = _kstar(K_star, solve.n)
    V = solve.solve(Ks.T).T
    mean = Ks @ solve.y_tilde
    var = _kss_diag(K_star_star, len(Ks)) - np.sum(Ks * V, axis=1)
    return mean, var


# ----------------------------------------------------------------------------
# literal dense contractions (small systems, reference path)


def u_tilde_star(U_slices, solve: TrainSolve, K_star):
    """U~*[t, a, b, c] for dense slices (U_train, U_star, ...)."""
    U, Us = U_slices[0], U_slices[1]
    V = solve.solve(_kstar(K_star, solve.n).T).T
    return Us - np.einsum("abcd,td->tabc", U, V)


def u_tilde_star_star(U_slices, solve: TrainSolve, K_star, Ut_star=None):
    """U~**[t, a, b] for dense slices."""
    U, Us, Uss = U_slices
    V = solve.solve(_kstar(K_star, solve.n).T).T
    if Ut_star is None:
        Ut_star = u_tilde_star(U_slices, solve, K_star)
    return Uss - np.einsum("tabc,tc->tab", Us + Ut_star, V)


def fwc_mean(Ut_star, solve: TrainSolve):
    y = solve.y_tilde
    B = solve.matrix()
    cubic = np.einsum("tabc,a,b,c->t", Ut_star, y, y, y)
    linear = np.einsum("tabc,ab,c->t", Ut_star, B, y)
    return (cubic - 3.0 * linear) / 6.0


def fwc_variance(Ut_star_star, solve: TrainSolve, gp_mean, f_U):
    """(<f^2>_U, Sigma_U) per test point."""
    y = solve.y_tilde
    B = solve.matrix()
    second = 0.5 * (np.einsum("tab,a,b->t", Ut_star_star, y, y) - np.einsum("tab,ab->t", Ut_star_star, B))
    return second, second - 2.0 * np.asarray(gp_mean) * np.asarray(f_U)


# ----------------------------------------------------------------------------
# posterior container


@dataclass
class Posterior:
    gp_mean: np.ndarray
    gp_var: np.ndarray
    fwc_mean: np.ndarray
    fwc_second_moment: np.ndarray
    fwc_var: np.ndarray
    N: float = np.inf
    sigma2: float = np.nan
    combined_mean: np.ndarray = field(init=False)
    combined_var: np.ndarray = field(init=False)
    negative_var: np.ndarray = field(init=False)

    def __post_init__(self):
        self.set_width(self.N)

    def set_width(self, N):
        if not np.isinf(N) and N < 1:
            raise ValueError("width N must be >= 1")
        self.N = N
        inv = 0.0 if np.isinf(N) else 1.0 / N
        self.combined_mean = self.gp_mean + inv * self.fwc_mean
        self.combined_var = self.gp_var + inv * self.fwc_var
        # reported as-is, flagged rather than clamped
        self.negative_var = self.combined_var < 0
        return self

    def __len__(self):
        return len(self.gp_mean)

    def to_csv(self, path, targets=None, ids=None):
        T = len(self)
        ids = range(T) if ids is None else ids
        tg = np.full(T, np.nan) if targets is None else np.asarray(targets, float)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["id", "gp_mean", "gp_var", "fwc_mean", "fwc_var", "combined_mean", "combined_var", "target"])
            for i, k in enumerate(ids):
                w.writerow([k] + [repr(float(a[i])) for a in (
                    self.gp_mean, self.gp_var, self.fwc_mean, self.fwc_var,
                    self.combined_mean, self.combined_var, tg)])


def combine(gp_mean, gp_var, f_U, f2_U, sigma_U, N, sigma2=np.nan) -> Posterior:
    post = Posterior(np.asarray(gp_mean, float), np.asarray(gp_var, float), np.asarray(f_U, float),
                     np.asarray(f2_U, float), np.asarray(sigma_U, float), N=N, sigma2=sigma2)
    if np.any(post.negative_var):
        warnings.warn(f"{int(post.negative_var.sum())} combined variances are negative", RuntimeWarning)
    return post


def fwc_from_operator(operator, solve: TrainSolve, K_star, gp_mean):
    """(f_U, <f^2>_U, Sigma_U) through a contraction backend."""
    V = solve.solve(_kstar(K_star, solve.n).T).T
    terms = operator.fwc_terms(solve.y_tilde, solve, V)
    f = mean_term(terms)
    f2 = second_moment_term(terms)
    return f, f2, f2 - 2.0 * gp_mean * f


def finite_width_posterior(K_train, K_star, K_star_star, y, sigma2, operator, N=np.inf,
                           jitter=DEFAULT_JITTER) -> Posterior:
    """GP posterior plus corrections, one independent channel per target column."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 2 and y.shape[1] > 1:
        posts = [finite_width_posterior(K_train, K_star, K_star_star, y[:, k], sigma2, operator, N, jitter)
                 for k in range(y.shape[1])]
        stack = lambda name: np.stack([getattr(p, name) for p in posts], axis=1)  # noqa: E731
        return combine(stack("gp_mean"), stack("gp_var"), stack("fwc_mean"),
                       stack("fwc_second_moment"), stack("fwc_var"), N, sigma2)
    y = y.reshape(-1)
    solve = TrainSolve(K_train, y, sigma2, jitter)
    mean, var = gp_posterior(K_train, K_star, K_star_star, y, sigma2, solve)
    f, f2, sig = fwc_from_operator(operator, solve, K_star, mean)
    return combine(mean, var, f, f2, sig, N, sigma2)


def expected_test_loss(posterior, targets, combined=True):
    """Mean over test points of (mean - target)^2 + variance."""
    tg = np.asarray(targets, dtype=float)
    if isinstance(posterior, Posterior):
        m = posterior.combined_mean if combined else posterior.gp_mean
        v = posterior.combined_var if combined else posterior.gp_var
    else:
        m, v = (np.asarray(a, float) for a in posterior)
    if m.shape != tg.shape:
        raise ShapeError("targets must align with test points")
    return float(np.mean((m - tg) ** 2 + v))
