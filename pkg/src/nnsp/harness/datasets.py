"""Synthetic quadratic-target regression data on the sphere."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def philox(seed, *stream):
    """Counter-based generator keyed by (seed, *stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def sample_sphere(m, d, rng, radius=None):
    r = np.sqrt(d) if radius is None else radius
    x = rng.standard_normal((m, d))
    return r * x / np.linalg.norm(x, axis=1, keepdims=True)


@dataclass
class QuadraticTarget:
    """g(x) = scale * x^T A x.

    ``scale`` makes E[g^2] = 1 under the uniform measure on the sphere of
    radius sqrt(d); it is computed analytically from A.
    """

    A: np.ndarray
    scale: float = 1.0

    def __call__(self, X):
        X = np.atleast_2d(X)
        return self.scale * np.einsum("ni,ij,nj->n", X, self.A, X)

    @staticmethod
    def second_moment(A):
        B = 0.5 * (A + A.T)
        d = len(B)
        tr = np.trace(B)
        return d / (d + 2.0) * (tr * tr + 2.0 * np.sum(B * B))


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    target: QuadraticTarget
    seed: int

    @property
    def d(self):
        return self.X_train.shape[1]


def gen_quadratic_dataset(d, n_train, n_test, seed=0, normalize=True) -> Dataset:
    """A_ij ~ N(0, 1), inputs uniform on the sphere of radius sqrt(d).

    Streams: 0 for A, 1 for the train inputs, 2 for the test inputs, so
    changing n_train leaves A and the test set untouched.
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    A = philox(seed, 0).standard_normal((d, d))
    scale = 1.0 / np.sqrt(QuadraticTarget.second_moment(A)) if normalize else 1.0
    g = QuadraticTarget(A, scale)
    Xtr = sample_sphere(n_train, d, philox(seed, 1))
    Xte = sample_sphere(n_test, d, philox(seed, 2))
    return Dataset(Xtr, g(Xtr), Xte, g(Xte), g, int(seed))
