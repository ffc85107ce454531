"""Contractions of the fourth cumulant needed by the finite-width corrections.

Every correction to the mean and second moment at a test point t reduces to
ten scalars.  Write y for the weighted train vector (K~^-1 y), v_t for the
GP interpolation weights K~^-1 k_t, and [B] for a pair of slots joined by
the matrix B (K~^-1 for the GP):

    a1 = U(t, y, y, y)    a2 = U(v, y, y, y)
    a3 = U(t, [B], y)     a4 = U(v, [B], y)
    b1 = U(t, t, y, y)    b2 = U(t, v, y, y)    b3 = U(v, v, y, y)
    b4 = U(t, t, [B])     b5 = U(t, v, [B])     b6 = U(v, v, [B])

Three backends produce them:

* ``EntryCumulant`` evaluates U entry by entry from a V provider, either
  materialized in packed symmetric storage or streamed chunk by chunk.
* ``QuadraticFactorCumulant`` uses the trace structure of the quadratic
  activation, U = sum of products of traces of S = X^T diag(w) X, which
  costs O(n^2 d^2) instead of O(n^4).
"""

from __future__ import annotations

from itertools import combinations

import numpy as np

from ._validation import ShapeError
from .cumulants import (
    FourthCumulant,
    U_entries,
    multiplicity_factor,
    n_sorted,
    sorted_tuples,
)

TERM_NAMES = ("a1", "a2", "a3", "a4", "b1", "b2", "b3", "b4", "b5", "b6")
MATERIALIZATION_CAP = 150


class ExplicitPair:
    """Pair operator given by an explicit symmetric matrix."""

    def __init__(self, B):
        B = np.asarray(B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ShapeError("pair matrix must be square")
        self.B = B

    def matrix(self):
        return self.B

    def apply(self, Z):
        return self.B @ Z

    def scaled(self, c):
        return ExplicitPair(c * self.B)


def mean_term(t):
    """Leading correction to the posterior mean from the ten scalars."""
    return (t["a1"] - t["a2"] - 3.0 * t["a3"] + 3.0 * t["a4"]) / 6.0


def second_moment_term(t):
    """Leading correction to the second moment from the ten scalars."""
    return 0.5 * (t["b1"] - 2.0 * t["b2"] + t["b3"] - t["b4"] + 2.0 * t["b5"] - t["b6"])


# ----------------------------------------------------------------------------
# entry-based backend


def _ordered_pairs(r):
    return [(p, q) for p in range(r) for q in range(r) if p != q]


def _reduce_train(quads, u, y, B, n, acc):
    """Scatter one chunk of sorted train quadruples into W, Wb, M, Mb."""
    f = u / multiplicity_factor(quads)
    for p in range(4):
        r = [k for k in range(4) if k != p]
        i = quads[:, p]
        y1, y2, y3 = (y[quads[:, k]] for k in r)
        acc["W"] += np.bincount(i, weights=6.0 * f * y1 * y2 * y3, minlength=n)
        q1, q2, q3 = (quads[:, k] for k in r)
        wb = B[q1, q2] * y3 + B[q1, q3] * y2 + B[q2, q3] * y1
        acc["Wb"] += np.bincount(i, weights=2.0 * f * wb, minlength=n)
    for p, q in _ordered_pairs(4):
        s, t = (k for k in range(4) if k not in (p, q))
        flat = quads[:, p] * n + quads[:, q]
        acc["M"] += np.bincount(flat, weights=2.0 * f * y[quads[:, s]] * y[quads[:, t]], minlength=n * n)
        acc["Mb"] += np.bincount(flat, weights=2.0 * f * B[quads[:, s], quads[:, t]], minlength=n * n)


def _reduce_star(t_idx, trip, u, y, B, n, T, acc):
    """Scatter chunk of (test, sorted train triple) entries into P and Pb."""
    f = u / multiplicity_factor(trip)
    for p in range(3):
        a, b = (trip[:, k] for k in range(3) if k != p)
        flat = t_idx * n + trip[:, p]
        acc["P"] += np.bincount(flat, weights=2.0 * f * y[a] * y[b], minlength=T * n)
        acc["Pb"] += np.bincount(flat, weights=2.0 * f * B[a, b], minlength=T * n)


def _reduce_star_star(t_idx, pairs, u, y, B, T, acc):
    f = u / multiplicity_factor(pairs)
    a, b = pairs[:, 0], pairs[:, 1]
    acc["b1"] += np.bincount(t_idx, weights=2.0 * f * y[a] * y[b], minlength=T)
    acc["b4"] += np.bincount(t_idx, weights=2.0 * f * B[a, b], minlength=T)


class EntryCumulant:
    """U slices over train (n) and test (T) points built from a V provider.

    ``L_joint`` is the last-hidden pre-activation kernel over train points
    followed by test points.  In materialized mode the three slices are
    stored in packed form (unique sorted index tuples); in streaming mode
    entries are generated chunk by chunk whenever a contraction is asked for.
    """

    def __init__(self, provider, L_joint, readout_var, n_train, mode="materialized",
                 cap=MATERIALIZATION_CAP, chunk=100_000):
        L = np.asarray(L_joint, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] < n_train:
            raise ShapeError("L_joint must be square and cover the training points")
        if mode not in ("materialized", "streaming"):
            raise ValueError("mode must be 'materialized' or 'streaming'")
        if mode == "materialized" and n_train > cap:
            raise MemoryError(
                f"n_train={n_train} exceeds the materialization cap {cap}; use mode='streaming'"
            )
        self.provider = provider
        self.L = L
        self.readout_var = float(readout_var)
        self.n = int(n_train)
        self.T = L.shape[0] - self.n
        self.mode = mode
        self.chunk = int(chunk)
        self._packed = None
        if mode == "materialized":
            self._packed = {
                "train": np.concatenate([u for _, u in self._train_chunks()]),
                "star": np.concatenate([u for *_, u in self._star_chunks()]),
                "star_star": np.concatenate([u for *_, u in self._star_star_chunks()]),
            }

    # chunk generators -----------------------------------------------------
    def _entries(self, quads):
        return U_entries(self.provider, self.L, self.readout_var, quads)

    def _train_chunks(self):
        quads = sorted_tuples(self.n, 4)
        for s0 in range(0, len(quads), self.chunk):
            q = quads[s0:s0 + self.chunk]
            if self._packed is not None:
                yield q, self._packed["train"][s0:s0 + self.chunk]
            else:
                yield q, self._entries(q)

    def _star_chunks(self):
        trip = sorted_tuples(self.n, 3)
        m = len(trip)
        total = self.T * m
        for s0 in range(0, total, self.chunk):
            k = np.arange(s0, min(total, s0 + self.chunk))
            t_idx, tr = k // m, trip[k % m]
            if self._packed is not None:
                yield t_idx, tr, self._packed["star"][s0:s0 + self.chunk]
            else:
                quads = np.column_stack([self.n + t_idx, tr])
                yield t_idx, tr, self._entries(quads)

    def _star_star_chunks(self):
        pairs = sorted_tuples(self.n, 2)
        m = len(pairs)
        total = self.T * m
        for s0 in range(0, total, self.chunk):
            k = np.arange(s0, min(total, s0 + self.chunk))
            t_idx, pr = k // m, pairs[k % m]
            if self._packed is not None:
                yield t_idx, pr, self._packed["star_star"][s0:s0 + self.chunk]
            else:
                tt = self.n + t_idx
                quads = np.column_stack([tt, tt, pr])
                yield t_idx, pr, self._entries(quads)

    # contractions ---------------------------------------------------------
    def fwc_terms(self, y_tilde, pair, V):
        n, T = self.n, self.T
        y = np.asarray(y_tilde, dtype=float)
        V = np.asarray(V, dtype=float).reshape(T, n)
        B = pair.matrix()
        acc = {"W": np.zeros(n), "Wb": np.zeros(n), "M": np.zeros(n * n), "Mb": np.zeros(n * n),
               "P": np.zeros(T * n), "Pb": np.zeros(T * n), "b1": np.zeros(T), "b4": np.zeros(T)}
        for q, u in self._train_chunks():
            _reduce_train(q, u, y, B, n, acc)
        for t_idx, tr, u in self._star_chunks():
            _reduce_star(t_idx, tr, u, y, B, n, T, acc)
        for t_idx, pr, u in self._star_star_chunks():
            _reduce_star_star(t_idx, pr, u, y, B, T, acc)
        M, Mb = acc["M"].reshape(n, n), acc["Mb"].reshape(n, n)
        P, Pb = acc["P"].reshape(T, n), acc["Pb"].reshape(T, n)
        return {
            "a1": P @ y, "a2": V @ acc["W"], "a3": Pb @ y, "a4": V @ acc["Wb"],
            "b1": acc["b1"], "b2": np.sum(V * P, axis=1), "b3": np.sum((V @ M) * V, axis=1),
            "b4": acc["b4"], "b5": np.sum(V * Pb, axis=1), "b6": np.sum((V @ Mb) * V, axis=1),
        }

    # dense views for small problems -----------------------------------------
    def train_tensor(self) -> FourthCumulant:
        vals = np.concatenate([u for _, u in self._train_chunks()])
        return FourthCumulant(vals, self.n)

    def dense_slices(self):
        """(U_train[n,n,n,n], U_star[T,n,n,n], U_star_star[T,n,n]) as dense arrays."""
        n, T = self.n, self.T
        if n > 40:
            raise MemoryError("dense slices are meant for small systems")
        idx = np.indices((n,) * 4).reshape(4, -1).T
        U = self._entries(idx).reshape((n,) * 4)
        idx3 = np.indices((n,) * 3).reshape(3, -1).T
        idx2 = np.indices((n,) * 2).reshape(2, -1).T
        Us = np.empty((T, n, n, n))
        Uss = np.empty((T, n, n))
        for t in range(T):
            tt = np.full((len(idx3), 1), n + t)
            Us[t] = self._entries(np.hstack([tt, idx3])).reshape(n, n, n)
            tt2 = np.full((len(idx2), 2), n + t)
            Uss[t] = self._entries(np.hstack([tt2, idx2])).reshape(n, n)
        return U, Us, Uss

    def storage_size(self):
        n, T = self.n, self.T
        return n_sorted(n, 4) + T * n_sorted(n, 3) + T * n_sorted(n, 2)


# ----------------------------------------------------------------------------
# factorized backend for the quadratic activation


def _quadratic_terms():
    """(weight, cycles) list with U / (readout^2 s^4) = sum weight * prod tr(cycle)."""
    slots = range(4)
    terms = []
    for a, b in combinations(slots, 2):
        c, d = (k for k in slots if k not in (a, b))
        terms.append((4.0, ((a, b), (c,), (d,))))
    for (a, b), (c, d) in (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))):
        terms.append((8.0, ((a, b), (c, d))))
    for trip in combinations(slots, 3):
        (d,) = (k for k in slots if k not in trip)
        terms.append((24.0, (trip, (d,))))
    for cyc in ((0, 1, 2, 3), (0, 1, 3, 2), (0, 2, 1, 3)):
        terms.append((48.0, (cyc,)))
    return tuple(terms)


QUADRATIC_TERMS = _quadratic_terms()


def _chain(mats, members, eye):
    out = eye
    for k in members:
        out = np.matmul(out, mats[k])
    return out


def _rotate(cycle, start):
    i = cycle.index(start)
    return cycle[i:] + cycle[:i]


def trace_U(S, pair_tensor=None):
    """sum of weight * prod of traces for the quadratic cumulant.

    S: list of four slot matrices (each (d, d) or batched (T, d, d)); when
    ``pair_tensor`` (d, d, d, d) is given, slots 2 and 3 are the pair and
    the corresponding entries of S are ignored.  The result still has to be
    multiplied by readout_var^2 * s^4.
    """
    d = pair_tensor.shape[0] if pair_tensor is not None else np.shape(S[0])[-1]
    eye = np.eye(d)
    total = 0.0
    for w, cycles in QUADRATIC_TERMS:
        val = 1.0
        if pair_tensor is None:
            for cyc in cycles:
                val = val * np.trace(_chain(S, cyc, eye), axis1=-2, axis2=-1)
            total = total + w * val
            continue
        c2 = next(c for c in cycles if 2 in c)
        c3 = next(c for c in cycles if 3 in c)
        for cyc in cycles:
            if cyc is not c2 and cyc is not c3:
                val = val * np.trace(_chain(S, cyc, eye), axis1=-2, axis2=-1)
        if c2 is c3:
            r = _rotate(tuple(c2), 2)
            j = r.index(3)
            P = _chain(S, r[1:j], eye)
            Q = _chain(S, r[j + 1:], eye)
            val = val * np.einsum("ijkl,...jk,...li->...", pair_tensor, P, Q)
        else:
            P = _chain(S, _rotate(tuple(c2), 2)[1:], eye)
            Q = _chain(S, _rotate(tuple(c3), 3)[1:], eye)
            val = val * np.einsum("ijkl,...ji,...lk->...", pair_tensor, P, Q)
        total = total + w * val
    return total


class QuadraticFactorCumulant:
    """U for one quadratic hidden layer via trace algebra on the raw inputs.

    L = s * x.x' + bias_var is represented exactly by appending a constant
    coordinate sqrt(bias_var / s) to every input.
    """

    mode = "factorized"

    def __init__(self, X_train, X_test, weight_var, readout_var, bias_var=0.0):
        Xtr = np.asarray(X_train, dtype=float)
        Xte = np.asarray(X_test, dtype=float).reshape(-1, Xtr.shape[1])
        d = Xtr.shape[1]
        self.s = float(weight_var) / d
        if bias_var:
            c = np.sqrt(bias_var / self.s)
            Xtr = np.hstack([Xtr, np.full((len(Xtr), 1), c)])
            Xte = np.hstack([Xte, np.full((len(Xte), 1), c)])
        self.Xtr, self.Xte = Xtr, Xte
        self.n, self.T = len(Xtr), len(Xte)
        self.scale = float(readout_var) ** 2 * self.s ** 4

    def pair_tensor(self, pair):
        Z = np.einsum("ai,aj->aij", self.Xtr, self.Xtr).reshape(self.n, -1)
        D = self.Xtr.shape[1]
        return (Z.T @ pair.apply(Z)).reshape(D, D, D, D)

    def slot(self, weights, points=None):
        X = self.Xtr if points is None else points
        return np.einsum("...a,ai,aj->...ij", weights, X, X)

    def fwc_terms(self, y_tilde, pair, V):
        y = np.asarray(y_tilde, dtype=float)
        V = np.asarray(V, dtype=float).reshape(self.T, self.n)
        Sy = self.slot(y)
        St = np.einsum("ti,tj->tij", self.Xte, self.Xte)
        Sv = self.slot(V)
        Tb = self.pair_tensor(pair)
        c = self.scale
        return {
            "a1": c * trace_U([St, Sy, Sy, Sy]),
            "a2": c * trace_U([Sv, Sy, Sy, Sy]),
            "a3": c * trace_U([St, Sy, None, None], Tb),
            "a4": c * trace_U([Sv, Sy, None, None], Tb),
            "b1": c * trace_U([St, St, Sy, Sy]),
            "b2": c * trace_U([St, Sv, Sy, Sy]),
            "b3": c * trace_U([Sv, Sv, Sy, Sy]),
            "b4": c * trace_U([St, St, None, None], Tb),
            "b5": c * trace_U([St, Sv, None, None], Tb),
            "b6": c * trace_U([Sv, Sv, None, None], Tb),
        }

    def entries(self, quads, points):
        """U at explicit index quadruples into ``points`` (for checks)."""
        q = np.asarray(quads, dtype=int)
        P = np.asarray(points, dtype=float)
        if P.shape[1] != self.Xtr.shape[1]:
            raise ShapeError("points must use the same (augmented) coordinates")
        S = [np.einsum("qi,qj->qij", P[q[:, k]], P[q[:, k]]) for k in range(4)]
        return self.scale * trace_U(S)

    def joint_points(self):
        return np.vstack([self.Xtr, self.Xte])


def build_cumulant_operator(X_train, X_test, spec, mode="auto", provider=None,
                            cap=MATERIALIZATION_CAP, quad_order=40, **provider_kw):
    """Pick a backend for the slices of U over train and test points.

    mode: 'auto' (factorized for one quadratic layer, else materialized up to
    the cap and streaming above it), 'factorized', 'materialized', 'streaming'.
    """
    from .cumulants import default_provider
    from .kernels import deep_kernel_recursion, linear_kernel

    Xtr = np.asarray(X_train, dtype=float)
    Xte = np.asarray(X_test, dtype=float).reshape(-1, Xtr.shape[1])
    quad_ok = spec.activation == "quadratic" and spec.depth == 1
    if mode == "auto":
        mode = "factorized" if quad_ok and provider is None else (
            "materialized" if len(Xtr) <= cap else "streaming")
    if mode == "factorized":
        if not quad_ok:
            raise ValueError("factorized mode needs one quadratic hidden layer")
        return QuadraticFactorCumulant(Xtr, Xte, spec.layer_weight_var(0), spec.readout_var,
                                       spec.layer_bias_var(0))
    Xj = np.vstack([Xtr, Xte])
    if spec.depth == 1:
        L = linear_kernel(Xj, spec.layer_weight_var(0), spec.layer_bias_var(0)).values
    else:
        L = deep_kernel_recursion(spec, Xj, quad_order)[-2].values
    if provider is None:
        provider = default_provider(spec.activation, **provider_kw)
    return EntryCumulant(provider, L, spec.readout_var, len(Xtr), mode=mode, cap=cap)


def build_cumulant_slices(X_train, X_test, spec, mode="auto", **kw):
    """Alias kept for symmetry with the other module-level builders."""
    return build_cumulant_operator(X_train, X_test, spec, mode=mode, **kw)
