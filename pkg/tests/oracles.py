"""Independent reference implementations used only by the tests.

Nothing here imports the package's numerical code: these are brute-force
re-derivations (Wick pairings, nested loops, dense solves, naive MLPs).
"""

import itertools
import math

import numpy as np


def perfect_matchings(items):
    items = list(items)
    if not items:
        yield []
        return
    first = items[0]
    for k in range(1, len(items)):
        rest = items[1:k] + items[k + 1:]
        for m in perfect_matchings(rest):
            yield [(first, items[k])] + m


def isserlis_moment(cov, slots):
    """E[prod_k z_{slots[k]}] for z ~ N(0, cov) by summing over all Wick pairings."""
    if len(slots) % 2:
        return 0.0
    total = 0.0
    for m in perfect_matchings(list(range(len(slots)))):
        p = 1.0
        for a, b in m:
            p *= cov[slots[a], slots[b]]
        total += p
    return total


def quadratic_connected_isserlis(L4, pairing=(0, 1, 2, 3)):
    """V for phi(z) = z^2: E[z1^2 z2^2 z3^2 z4^2] - E[za^2 zb^2] E[zc^2 zd^2]."""
    a, b, c, d = pairing
    mu4 = isserlis_moment(L4, [0, 0, 1, 1, 2, 2, 3, 3])
    return mu4 - isserlis_moment(L4, [a, a, b, b]) * isserlis_moment(L4, [c, c, d, d])


def quadratic_U_isserlis(L, readout_var, idx):
    L4 = L[np.ix_(idx, idx)]
    return readout_var ** 2 * sum(quadratic_connected_isserlis(L4, p)
                                  for p in [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)])


def dense_U_quadratic(L, readout_var):
    """Full m^4 tensor by the Isserlis oracle (tiny m only)."""
    m = len(L)
    U = np.zeros((m,) * 4)
    for q in itertools.combinations_with_replacement(range(m), 4):
        v = quadratic_U_isserlis(L, readout_var, list(q))
        for p in set(itertools.permutations(q)):
            U[p] = v
    return U


def dense_gp(K_train, K_star, K_ss_diag, y, sigma2):
    """Posterior mean and variance by numpy.linalg.solve (no Cholesky)."""
    A = K_train + sigma2 * np.eye(len(K_train))
    alpha = np.linalg.solve(A, y)
    mean = K_star @ alpha
    W = np.linalg.solve(A, K_star.T)
    var = K_ss_diag - np.einsum("ti,it->t", K_star, W)
    return mean, var


def naive_fwc(U_full, n, K_train, K_star, y, sigma2):
    """f_U, <f^2>_U per test point by explicit nested loops over a dense U
    whose first n indices are train points and the rest test points."""
    B = np.linalg.inv(K_train + sigma2 * np.eye(n))
    yt = [sum(B[a, b] * y[b] for b in range(n)) for a in range(n)]
    T = K_star.shape[0]
    means, seconds = [], []
    for t in range(T):
        s = n + t
        v = [sum(B[d, e] * K_star[t, e] for e in range(n)) for d in range(n)]
        Ut = np.zeros((n, n, n))
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    Ut[a, b, c] = U_full[s, a, b, c] - sum(U_full[a, b, c, d] * v[d] for d in range(n))
        f = 0.0
        for a in range(n):
            for b in range(n):
                for c in range(n):
                    f += Ut[a, b, c] * (yt[a] * yt[b] * yt[c] - 3.0 * B[a, b] * yt[c])
        Utt = np.zeros((n, n))
        for a in range(n):
            for b in range(n):
                Utt[a, b] = U_full[s, s, a, b] - sum((U_full[s, a, b, c] + Ut[a, b, c]) * v[c] for c in range(n))
        f2 = 0.0
        for a in range(n):
            for b in range(n):
                f2 += 0.5 * Utt[a, b] * (yt[a] * yt[b] - B[a, b])
        means.append(f / 6.0)
        seconds.append(f2)
    return np.array(means), np.array(seconds)


def naive_mlp(params, activation, x):
    """Single-seed forward pass, one input at a time, with python loops over units."""
    h = list(map(float, x))
    for W in params[:-1]:
        h = [activation(sum(W[i, j] * h[j] for j in range(len(h)))) for i in range(W.shape[0])]
    a = params[-1]
    return [sum(a[o, j] * h[j] for j in range(len(h))) for o in range(a.shape[0])]


def random_psd(rng, k, unit_diag=False, offdiag=None):
    if offdiag is not None:
        while True:
            C = np.eye(k)
            iu = np.triu_indices(k, 1)
            C[iu] = rng.uniform(-offdiag, offdiag, len(iu[0]))
            C = C + C.T - np.eye(k)
            if np.linalg.eigvalsh(C)[0] > 1e-6:
                return C
    A = rng.standard_normal((k, k + 2))
    C = A @ A.T / (k + 2)
    if unit_diag:
        s = np.sqrt(np.diag(C))
        C = C / np.outer(s, s)
    return C


def ar1(rng, n, rho):
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1 - rho ** 2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    return x
