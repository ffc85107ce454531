"""scikit-learn style estimators wrapping the kernel, FWC, EK and Langevin code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .equivalent_kernel import kernel_evaluator, spectrum_from_points
from .gp_inference import DEFAULT_JITTER, TrainSolve, finite_width_posterior, gp_posterior
from .kernels import NetworkSpec, output_kernel
from .contractions import build_cumulant_operator
from .langevin import MLP, TrainProtocol, forward, run_chain


class _SpecMixin:
    def _spec(self):
        return NetworkSpec(self.depth, self.activation, self.weight_var, self.readout_var, self.bias_var)


class NNSPRegressor(_SpecMixin, RegressorMixin, BaseEstimator):
    """GP regression with the NNGP kernel plus the leading 1/N correction.

    ``width`` is the hidden width N used to combine the GP and the correction;
    ``np.inf`` gives the plain GP.  ``predict(X, return_std=True)`` returns the
    combined mean and standard deviation (NaN where the variance is negative).
    """

    def __init__(self, depth=1, activation="quadratic", weight_var=1.0, readout_var=1.0, bias_var=0.0,
                 sigma2=0.1, width=np.inf, cumulant_mode="auto", jitter=DEFAULT_JITTER, quad_order=40):
        self.depth = depth
        self.activation = activation
        self.weight_var = weight_var
        self.readout_var = readout_var
        self.bias_var = bias_var
        self.sigma2 = sigma2
        self.width = width
        self.cumulant_mode = cumulant_mode
        self.jitter = jitter
        self.quad_order = quad_order

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self.spec_ = self._spec()
        self.X_train_ = X
        self.y_train_ = y
        self.n_features_in_ = X.shape[1]
        K = output_kernel(self.spec_, X, self.quad_order).values
        self.solve_ = TrainSolve(K, y, self.sigma2, self.jitter)
        return self

    def _blocks(self, X):
        Xj = np.vstack([self.X_train_, X])
        K = output_kernel(self.spec_, Xj, self.quad_order).values
        n = len(self.X_train_)
        return K[:n, :n], K[n:, :n], np.diag(K)[n:]

    def posterior(self, X):
        """Full Posterior (GP, correction terms and combined values) at X."""
        check_is_fitted(self, "solve_")
        X = check_array(X)
        Ktr, Ks, Kss = self._blocks(X)
        op = build_cumulant_operator(self.X_train_, X, self.spec_, mode=self.cumulant_mode,
                                     quad_order=self.quad_order)
        return finite_width_posterior(Ktr, Ks, Kss, self.y_train_, self.sigma2, op, self.width, self.jitter)

    def predict(self, X, return_std=False):
        check_is_fitted(self, "solve_")
        X = check_array(X)
        if np.isinf(self.width):
            Ktr, Ks, Kss = self._blocks(X)
            if self.y_train_.ndim == 1:
                mean, var = gp_posterior(Ktr, Ks, Kss, self.y_train_, self.sigma2, self.solve_)
            else:
                mean = Ks @ self.solve_.y_tilde
                var = gp_posterior(Ktr, Ks, Kss, self.y_train_[:, 0], self.sigma2)[1]
                var = np.repeat(var[:, None], mean.shape[1], axis=1)
        else:
            post = self.posterior(X)
            mean, var = post.combined_mean, post.combined_var
        if return_std:
            with np.errstate(invalid="ignore"):
                return mean, np.where(var >= 0, np.sqrt(np.abs(var)), np.nan)
        return mean


class EquivalentKernelRegressor(_SpecMixin, RegressorMixin, BaseEstimator):
    """Equivalent-kernel prediction for a train set of size ``n_train``.

    ``fit(X, y)`` takes samples X of the input measure and the target values
    y = g(X); the Nystrom spectrum is computed on X and g is projected on it.
    The fitted model predicts the dataset-averaged GP mean at ``n_train``.
    """

    def __init__(self, depth=1, activation="quadratic", weight_var=1.0, readout_var=1.0, bias_var=0.0,
                 sigma2=0.1, n_train=100, rank_cut=1e-6, quad_order=40):
        self.depth = depth
        self.activation = activation
        self.weight_var = weight_var
        self.readout_var = readout_var
        self.bias_var = bias_var
        self.sigma2 = sigma2
        self.n_train = n_train
        self.rank_cut = rank_cut
        self.quad_order = quad_order

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        self.model_ = spectrum_from_points(kernel_evaluator(self._spec(), self.quad_order), X, self.rank_cut)
        self.filter_factors_ = self.model_.filter_factors(self.n_train, self.sigma2)
        self.coef_ = self.filter_factors_ * self.model_.project(y)
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return self.model_.eigenfunctions(X) @ self.coef_


class LangevinMLPRegressor(RegressorMixin, BaseEstimator):
    """Fully connected net trained by full-batch Langevin dynamics.

    The prior is N(0, weight_var / fan_in) per hidden layer and
    N(0, readout_var / width) for the readout; the temperature is 2 sigma2.
    ``fit`` keeps ``n_snapshots`` evenly spaced weight samples after burn-in
    and ``predict`` averages the outputs over them and over seeds.  Pass
    ``probes`` to ``fit`` to get exact time averages in ``probe_mean_``.
    """

    def __init__(self, hidden_widths=(128,), activation="quadratic", weight_var=1.0, readout_var=1.0,
                 sigma2=0.2, dt=1e-4, n_epochs=20000, burn_in=2000, thin=10, n_seeds=4,
                 n_snapshots=50, master_seed=0):
        self.hidden_widths = hidden_widths
        self.activation = activation
        self.weight_var = weight_var
        self.readout_var = readout_var
        self.sigma2 = sigma2
        self.dt = dt
        self.n_epochs = n_epochs
        self.burn_in = burn_in
        self.thin = thin
        self.n_seeds = n_seeds
        self.n_snapshots = n_snapshots
        self.master_seed = master_seed

    def fit(self, X, y, probes=None):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        widths = (X.shape[1], *tuple(self.hidden_widths), 1)
        n_hidden = len(widths) - 2
        wv = np.broadcast_to(np.atleast_1d(self.weight_var), (n_hidden,))
        scaled = (*map(float, wv), float(self.readout_var))
        self.protocol_ = TrainProtocol.for_network(
            widths, scaled, self.sigma2, self.dt, self.n_epochs, burn_in=self.burn_in, thin=self.thin,
            seeds=range(self.n_seeds), master_seed=self.master_seed)
        net = MLP.from_prior(widths, self.protocol_.prior_variances(), self.activation,
                             self.protocol_.seeds, self.master_seed)
        n_kept = (self.n_epochs - self.burn_in) // self.thin
        every = max(1, n_kept // max(1, self.n_snapshots))
        snaps = []

        def keep(state):
            if len(state.series) % every == 0:
                snaps.append([p.copy() for p in state.mlp.params])

        probe_pts = X[:1] if probes is None else check_array(probes)
        self.chain_ = run_chain(self.protocol_, net, X, y, probe_pts, on_sample=keep)
        self.snapshots_ = snaps
        self.widths_ = widths
        if probes is not None:
            self.probe_mean_ = self.chain_.mean
        return self

    def predict(self, X):
        check_is_fitted(self, "snapshots_")
        X = check_array(X)
        acc = np.zeros(len(X))
        for params in self.snapshots_:
            acc += forward(MLP(self.widths_, self.activation, params), X)[:, :, 0].mean(axis=0)
        return acc / len(self.snapshots_)
