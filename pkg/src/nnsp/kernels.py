"""NNGP kernels for fully connected networks.

Conventions: first-layer weights have variance weight_var / d, the readout
has variance readout_var / N.  All kernels here are the infinite-width
(Gaussian) covariance of the network output or of a hidden pre-activation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import ShapeError, as_matrix, check_nonnegative, check_positive
from .activations import get_activation
from .quadrature import gaussian_product_expectation

ARCCOS_EPS = 1e-12
DEFAULT_JITTER = 1e-10


@dataclass
class InputSet:
    """n x d input matrix, optionally flagged as lying on a sphere."""

    points: np.ndarray
    normalized: bool = False
    sphere_radius: float | None = None

    def __post_init__(self):
        self.points = as_matrix(self.points, "points")
        n, d = self.points.shape
        if n < 1 or d < 1:
            raise ShapeError("an InputSet needs n >= 1 and d >= 1")
        if self.normalized:
            if self.sphere_radius is None:
                self.sphere_radius = float(np.sqrt(d))
            norms = np.linalg.norm(self.points, axis=1)
            if np.max(np.abs(norms - self.sphere_radius)) > 1e-9:
                raise ValueError("points flagged normalized but not on the sphere")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n


@dataclass
class KernelMatrix:
    """Symmetric PSD Gram matrix plus the jitter used when factorizing."""

    values: np.ndarray
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self):
        return self.values.shape

    def symmetry_error(self):
        v = self.values
        scale = max(np.max(np.abs(v)), 1e-300)
        return float(np.max(np.abs(v - v.T)) / scale)

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(0.5 * (self.values + self.values.T))[0])

    def check(self, sym_tol=1e-12, psd_tol=1e-8):
        """Raise if the matrix is not symmetric or not PSD up to jitter."""
        if self.symmetry_error() > sym_tol:
            raise ValueError(f"kernel not symmetric (rel err {self.symmetry_error():.2e})")
        dmax = max(np.max(np.diag(self.values)), 1e-300)
        lam = self.min_eigenvalue()
        if lam < -psd_tol * dmax:
            raise ValueError(f"kernel not PSD (min eigenvalue {lam:.3e})")
        return True

    def regularized(self):
        """Values with the jitter policy applied (jitter x max diagonal)."""
        v = self.values
        return v + self.jitter * max(np.max(np.diag(v)), 0.0) * np.eye(v.shape[0])


@dataclass
class NetworkSpec:
    """Depth, activation and prior variances of a fully connected net.

    ``weight_var`` holds one scaled variance per hidden layer (a scalar is
    broadcast).  ``bias_var`` likewise, default no biases.
    """

    depth: int = 1
    activation: str = "quadratic"
    weight_var: float | Sequence[float] = 1.0
    readout_var: float = 1.0
    bias_var: float | Sequence[float] = 0.0
    _wv: tuple = field(init=False, repr=False)
    _bv: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if int(self.depth) < 1:
            raise ValueError("depth must be at least one hidden layer")
        self.depth = int(self.depth)
        get_activation(self.activation)
        self._wv = self._per_layer(self.weight_var, "weight_var", positive=True)
        self._bv = self._per_layer(self.bias_var, "bias_var", positive=False)
        check_positive(self.readout_var, "readout_var")

    def _per_layer(self, v, name, positive):
        vals = np.broadcast_to(np.atleast_1d(np.asarray(v, dtype=float)), (self.depth,))
        if vals.shape != (self.depth,):
            raise ValueError(f"{name} needs {self.depth} entries")
        for x in vals:
            (check_positive if positive else check_nonnegative)(x, name)
        return tuple(float(x) for x in vals)

    def layer_weight_var(self, layer):
        return self._wv[layer]

    def layer_bias_var(self, layer):
        return self._bv[layer]


def _points(inputs):
    if isinstance(inputs, InputSet):
        return inputs.points
    return as_matrix(inputs, "inputs")


def linear_kernel(inputs, weight_var=1.0, bias_var=0.0, other=None) -> KernelMatrix:
    """Pre-activation kernel of the first layer, weight_var * x.x' / d (+ bias_var).

    With ``other`` the rectangular cross kernel is returned as a plain array.
    """
    X = _points(inputs)
    check_positive(weight_var, "weight_var")
    d = X.shape[1]
    if other is not None:
        Y = _points(other)
        if Y.shape[1] != d:
            raise ShapeError(f"dimension mismatch: {d} vs {Y.shape[1]}")
        return weight_var * (X @ Y.T) / d + bias_var
    L = weight_var * (X @ X.T) / d + bias_var
    return KernelMatrix(0.5 * (L + L.T))


def _split_diag(L):
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise ShapeError("kernel must be 2-D")
    return L


def quadratic_kernel(L, readout_var=1.0, diag_left=None, diag_right=None) -> KernelMatrix:
    """Output kernel of a quadratic hidden layer, s_a^2 (L_aa L_bb + 2 L_ab^2).

    For a rectangular block pass the two diagonals explicitly.
    """
    L = _split_diag(L)
    check_positive(readout_var, "readout_var")
    if L.shape[0] == L.shape[1] and diag_left is None:
        dl = dr = np.diag(L)
    else:
        if diag_left is None or diag_right is None:
            raise ShapeError("rectangular blocks need diag_left and diag_right")
        dl, dr = np.asarray(diag_left, float), np.asarray(diag_right, float)
    K = readout_var * (np.outer(dl, dr) + 2.0 * L * L)
    if K.shape[0] == K.shape[1] and diag_left is None:
        return KernelMatrix(0.5 * (K + K.T))
    return K


def relu_kernel(L, readout_var=1.0, diag_left=None, diag_right=None) -> KernelMatrix:
    """Arc-cosine kernel of a ReLU hidden layer."""
    L = _split_diag(L)
    check_positive(readout_var, "readout_var")
    square = L.shape[0] == L.shape[1] and diag_left is None
    if square:
        dl = dr = np.diag(L)
    else:
        if diag_left is None or diag_right is None:
            raise ShapeError("rectangular blocks need diag_left and diag_right")
        dl, dr = np.asarray(diag_left, float), np.asarray(diag_right, float)
    if np.any(dl <= 0) or np.any(dr <= 0):
        bad = int(np.argmin(np.concatenate([dl, dr])))
        raise ValueError(f"relu_kernel needs a strictly positive diagonal (entry {bad})")
    norm = np.sqrt(np.outer(dl, dr))
    cos = np.clip(L / norm, -1.0, 1.0)
    theta = np.arccos(cos)
    K = readout_var * norm / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)
    if square:
        return KernelMatrix(0.5 * (K + K.T))
    return K


def linear_readout_kernel(L, readout_var=1.0, **_):
    L = _split_diag(L)
    K = readout_var * L
    if L.shape[0] == L.shape[1]:
        return KernelMatrix(0.5 * (K + K.T))
    return K


_CLOSED_FORMS = {"quadratic": quadratic_kernel, "relu": relu_kernel, "linear": linear_readout_kernel}


def closed_form_kernel(activation, L, readout_var=1.0, **kw):
    return _CLOSED_FORMS[get_activation(activation).name](L, readout_var, **kw)


def gaussian_layer_map(K_prev, activation, quad_order=40, eps=ARCCOS_EPS):
    """E[phi(h_a) phi(h_b)] under N(0, K_prev) for all pairs, by quadrature.

    Returns (matrix, n_clamped) where n_clamped counts pairs whose
    correlation had to be clamped into [-1+eps, 1-eps].
    """
    K = np.asarray(K_prev, dtype=float)
    m = K.shape[0]
    iu, ju = np.triu_indices(m)
    dg = np.diag(K)
    a, b, c = dg[iu], dg[ju], K[iu, ju]
    norm = np.sqrt(np.maximum(a * b, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = np.where(norm > 0, c / np.where(norm > 0, norm, 1.0), 0.0)
    off = iu != ju
    bad = off & (np.abs(rho) > 1.0 - eps)
    n_clamped = int(np.count_nonzero(bad & (np.abs(rho) > 1.0 + 1e-9)))
    rho = np.where(off, np.clip(rho, -1.0 + eps, 1.0 - eps), 1.0)
    cov = np.empty((len(iu), 2, 2))
    cov[:, 0, 0], cov[:, 1, 1] = a, b
    cov[:, 0, 1] = cov[:, 1, 0] = rho * norm
    vals, _ = gaussian_product_expectation(cov, activation, order=quad_order)
    out = np.empty((m, m))
    out[iu, ju] = vals
    out[ju, iu] = vals
    return out, n_clamped


def deep_kernel_recursion(spec: NetworkSpec, inputs, quad_order=40) -> list:
    """Layer-by-layer kernels at leading order.

    Returns [K^(1), ..., K^(depth), K_out]: the pre-activation kernel of each
    hidden layer followed by the output kernel.  Layer maps are Gaussian
    averages evaluated by quadrature (the 1/N back-reaction is not included).
    """
    if quad_order < 8:
        raise ValueError("quad_order must be >= 8")
    X = _points(inputs)
    layers = [linear_kernel(X, spec.layer_weight_var(0), spec.layer_bias_var(0))]
    total_clamped = 0
    for ell in range(1, spec.depth + 1):
        E, nc = gaussian_layer_map(layers[-1].values, spec.activation, quad_order)
        total_clamped += nc
        if ell < spec.depth:
            K = spec.layer_weight_var(ell) * E + spec.layer_bias_var(ell)
        else:
            K = spec.readout_var * E
        layers.append(KernelMatrix(K))
    if total_clamped:
        warnings.warn(f"clamped {total_clamped} correlations outside [-1, 1]", RuntimeWarning)
    return layers


def output_kernel(spec: NetworkSpec, inputs, quad_order=40) -> KernelMatrix:
    """Output kernel, closed form for one hidden layer, quadrature otherwise."""
    X = _points(inputs)
    if spec.depth == 1 and spec.layer_bias_var(0) == 0.0:
        L = linear_kernel(X, spec.layer_weight_var(0)).values
        return closed_form_kernel(spec.activation, L, spec.readout_var)
    return deep_kernel_recursion(spec, X, quad_order)[-1]


def last_hidden_kernel(spec: NetworkSpec, inputs, quad_order=40) -> np.ndarray:
    """Pre-activation kernel feeding the readout (L for one hidden layer)."""
    X = _points(inputs)
    if spec.depth == 1:
        return linear_kernel(X, spec.layer_weight_var(0), spec.layer_bias_var(0)).values
    return deep_kernel_recursion(spec, X, quad_order)[-2].values


__all__ = [
    "InputSet",
    "KernelMatrix",
    "NetworkSpec",
    "linear_kernel",
    "quadratic_kernel",
    "relu_kernel",
    "closed_form_kernel",
    "gaussian_layer_map",
    "deep_kernel_recursion",
    "output_kernel",
    "last_hidden_kernel",
]
