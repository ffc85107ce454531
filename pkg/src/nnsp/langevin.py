"""Langevin training of small fully connected nets and chain diagnostics.

Update per parameter array (full batch, total square loss):

    w <- w - (gamma w + grad L) dt + sqrt(2 T dt) xi,    xi ~ N(0, 1).

With gamma_l = T / sigma2_w,l the stationary law is the Bayesian posterior
with prior N(0, sigma2_w,l) and observation noise sigma2 = T / 2.

Many independent chains ("seeds") are run together along a leading axis.
Each seed owns a Philox stream, so results do not depend on how many seeds
share a batch.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._validation import DivergenceError, InsufficientDataError, ShapeError, check_positive
from .activations import get_activation

CHECKPOINT_VERSION = 1


# ----------------------------------------------------------------------------
# network


@dataclass
class MLP:
    """Batch of fully connected nets sharing an architecture.

    ``params`` is [W_1, ..., W_L, a] with W_l of shape (S, N_l, N_{l-1}) and
    the readout a of shape (S, out, N_L).  No biases.  With no hidden layer
    the net is the linear model f = a x.
    """

    widths: tuple
    activation: str
    params: list

    @property
    def n_seeds(self):
        return self.params[0].shape[0]

    @property
    def fan_ins(self):
        return tuple(self.widths[:-1])

    @classmethod
    def zeros(cls, widths, activation="quadratic", n_seeds=1):
        widths = tuple(int(w) for w in widths)
        ps = [np.zeros((n_seeds, widths[k + 1], widths[k])) for k in range(len(widths) - 1)]
        return cls(widths, activation, ps)

    @classmethod
    def from_prior(cls, widths, variances, activation="quadratic", seeds=(0,), master_seed=0):
        """Draw each seed's weights from N(0, variances[l]) with its own stream."""
        net = cls.zeros(widths, activation, len(seeds))
        for s, seed in enumerate(seeds):
            rng = _stream(master_seed, seed, 1)
            for k, p in enumerate(net.params):
                p[s] = math.sqrt(variances[k]) * rng.standard_normal(p.shape[1:])
        return net

    def copy(self):
        return MLP(self.widths, self.activation, [p.copy() for p in self.params])


def _as_features(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != d:
        raise ShapeError(f"inputs have {X.shape[1]} features, network expects {d}")
    return X.T  # (d, n)


def forward(mlp: MLP, X, keep=False):
    """Outputs of every seed, shape (S, n, out).  ``keep`` also returns caches."""
    act = get_activation(mlp.activation)
    H = _as_features(X, mlp.widths[0])
    Z_list, H_list = [], [H]
    for W in mlp.params[:-1]:
        Z = np.matmul(W, H)
        H = act.fn(Z)
        Z_list.append(Z)
        H_list.append(H)
    f = np.matmul(mlp.params[-1], H)  # (S, out, n)
    out = np.swapaxes(f, 1, 2)
    return (out, (Z_list, H_list)) if keep else out


def loss_grad(mlp: MLP, X, y):
    """Total square loss sum_a (y_a - f(x_a))^2 and its gradient per parameter array.

    Returns (loss per seed (S,), list of gradients matching ``mlp.params``).
    """
    act = get_activation(mlp.activation)
    f, (Zs, Hs) = forward(mlp, X, keep=True)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != f.shape[1]:
        raise ShapeError("targets do not match the number of inputs")
    if y.shape[0] == 0:
        raise ShapeError("dataset is empty")
    r = np.swapaxes(f - y[None], 1, 2)  # (S, out, n)
    loss = np.sum(r * r, axis=(1, 2))
    g = 2.0 * r
    grads = [None] * len(mlp.params)
    grads[-1] = np.matmul(g, np.swapaxes(Hs[-1], -1, -2))
    delta = np.matmul(np.swapaxes(mlp.params[-1], 1, 2), g)  # (S, N_L, n)
    for k in range(len(mlp.params) - 2, -1, -1):
        delta = delta * act.grad(Zs[k])
        grads[k] = np.matmul(delta, np.swapaxes(Hs[k], -1, -2))
        if k > 0:
            delta = np.matmul(np.swapaxes(mlp.params[k], 1, 2), delta)
    return loss, grads


# ----------------------------------------------------------------------------
# protocol and hyperparameter map


@dataclass
class TrainProtocol:
    dt: float
    T: float
    gammas: tuple  # weight decay per parameter array
    n_epochs: int
    burn_in: int = 0
    thin: int = 100
    seeds: tuple = (0,)
    master_seed: int = 0

    def __post_init__(self):
        check_positive(self.dt, "dt")
        if self.T < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 <= self.burn_in < self.n_epochs:
            raise ValueError("need 0 <= burn_in < n_epochs")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        self.gammas = tuple(float(g) for g in self.gammas)
        self.seeds = tuple(int(s) for s in self.seeds)

    @property
    def sigma2(self):
        """Observation noise of the equivalent Bayesian posterior."""
        return self.T / 2.0

    def prior_variances(self):
        """sigma2_w per parameter array, T / gamma."""
        return tuple(self.T / g for g in self.gammas)

    @classmethod
    def from_posterior(cls, sigma2, prior_variances, dt, n_epochs, **kw):
        """Inverse of the hyperparameter map: T = 2 sigma2, gamma = T / sigma2_w."""
        T = 2.0 * sigma2
        return cls(dt=dt, T=T, gammas=tuple(T / v for v in prior_variances), n_epochs=n_epochs, **kw)

    @classmethod
    def for_network(cls, widths, scaled_vars, sigma2, dt, n_epochs, **kw):
        """Protocol whose prior has variance scaled_var_l / fan_in_l per layer."""
        prior = tuple(v / fi for v, fi in zip(scaled_vars, widths[:-1]))
        return cls.from_posterior(sigma2, prior, dt, n_epochs, **kw)


def stiffness_estimate(mlp: MLP, X, y, protocol: TrainProtocol, iters=20, eps=1e-5, seed=0):
    """max_l gamma_l plus the top loss-Hessian eigenvalue (power iteration, first seed)."""
    net = MLP(mlp.widths, mlp.activation, [p[:1].copy() for p in mlp.params])
    rng = np.random.default_rng(seed)
    v = [rng.standard_normal(p.shape) for p in net.params]
    lam = 0.0
    for _ in range(iters):
        nrm = math.sqrt(sum(float(np.sum(a * a)) for a in v))
        v = [a / nrm for a in v]
        plus = MLP(net.widths, net.activation, [p + eps * a for p, a in zip(net.params, v)])
        minus = MLP(net.widths, net.activation, [p - eps * a for p, a in zip(net.params, v)])
        gp, gm = loss_grad(plus, X, y)[1], loss_grad(minus, X, y)[1]
        hv = [(a - b) / (2 * eps) for a, b in zip(gp, gm)]
        lam = sum(float(np.sum(a * b)) for a, b in zip(hv, v))
        v = hv
    return max(protocol.gammas) + abs(lam)


# ----------------------------------------------------------------------------
# chain state


def _stream(master_seed, seed, purpose):
    """Philox stream for (master seed, chain seed, purpose); purpose 0 = noise, 1 = init."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(master_seed), int(seed), int(purpose)])))


@dataclass
class ChainState:
    mlp: MLP
    epoch: int
    rngs: list
    sums: np.ndarray  # running sums of probe outputs per seed (S, P, out)
    count: int
    series: list = field(default_factory=list)  # thinned probe outputs, each (S, P, out)
    series_epochs: list = field(default_factory=list)
    loss_trace: list = field(default_factory=list)
    _buf: np.ndarray | None = None
    _buf_state: list | None = None
    _buf_pos: int = 0

    def save(self, path):
        meta = {
            "version": CHECKPOINT_VERSION,
            "widths": list(self.mlp.widths),
            "activation": self.mlp.activation,
            "epoch": self.epoch,
            "count": self.count,
            "buf_pos": self._buf_pos,
            "buf_state": self._buf_state,
            "rng_state": [r.bit_generator.state for r in self.rngs],
            "series_epochs": self.series_epochs,
        }
        arrays = {f"param{k}": p for k, p in enumerate(self.mlp.params)}
        arrays["sums"] = self.sums
        arrays["loss_trace"] = np.asarray(self.loss_trace, dtype=float)
        arrays["series"] = np.asarray(self.series) if self.series else np.zeros((0,) + self.sums.shape)
        np.savez(path, meta=np.frombuffer(json.dumps(meta, default=_json_int).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            meta = _decode_arrays(json.loads(bytes(z["meta"]).decode()))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            n_par = len(meta["widths"]) - 1
            params = [z[f"param{k}"].copy() for k in range(n_par)]
            sums = z["sums"].copy()
            series = list(z["series"].copy())
            loss_trace = list(z["loss_trace"])
        rngs = []
        for st in meta["rng_state"]:
            g = np.random.Generator(np.random.Philox())
            g.bit_generator.state = st
            rngs.append(g)
        state = cls(MLP(tuple(meta["widths"]), meta["activation"], params), meta["epoch"], rngs, sums,
                    meta["count"], series, list(meta["series_epochs"]), loss_trace)
        state._buf_state = meta["buf_state"]
        state._buf_pos = meta["buf_pos"]
        return state


def _json_int(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return {"__ndarray__": o.tolist(), "dtype": str(o.dtype)}
    raise TypeError(type(o))


def _decode_arrays(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.asarray(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _decode_arrays(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode_arrays(v) for v in obj]
    return obj


def init_state(mlp: MLP, protocol: TrainProtocol, n_probe, n_out=1) -> ChainState:
    if len(protocol.seeds) != mlp.n_seeds:
        raise ShapeError("protocol seeds and network batch size differ")
    if len(protocol.gammas) != len(mlp.params):
        raise ShapeError(f"need {len(mlp.params)} weight decays, got {len(protocol.gammas)}")
    rngs = [_stream(protocol.master_seed, s, 0) for s in protocol.seeds]
    return ChainState(mlp.copy(), 0, rngs, np.zeros((mlp.n_seeds, n_probe, n_out)), 0)


_NOISE_BLOCK = 64  # epochs of noise drawn per refill


def _noise(state: ChainState, sizes):
    """Standard normals for one epoch, (S, total) drawn per seed in blocks of epochs."""
    total = sum(sizes)
    if state._buf is None or state._buf_pos >= _NOISE_BLOCK:
        resumed = state._buf is None and state._buf_state is not None and state._buf_pos < _NOISE_BLOCK
        if resumed:  # rewind to the start of the block in use at save time
            for r, st in zip(state.rngs, state._buf_state):
                r.bit_generator.state = st
        else:
            state._buf_state = [r.bit_generator.state for r in state.rngs]
            state._buf_pos = 0
        state._buf = np.stack([r.standard_normal((_NOISE_BLOCK, total)) for r in state.rngs], axis=1)
    out = state._buf[state._buf_pos]
    state._buf_pos += 1
    return out


def langevin_step(state: ChainState, protocol: TrainProtocol, X, y, noise=None):
    """One full-batch update of every seed; returns the pre-update loss per seed."""
    mlp = state.mlp
    loss, grads = loss_grad(mlp, X, y)
    if not np.all(np.isfinite(loss)):
        raise DivergenceError(
            f"non-finite loss at epoch {state.epoch}; dt={protocol.dt} is likely too large",
            epoch=state.epoch, meta={"dt": protocol.dt, "widths": mlp.widths})
    sizes = [p[0].size for p in mlp.params]
    if noise is None:
        noise = _noise(state, sizes) if protocol.T > 0 else None
    amp = math.sqrt(2.0 * protocol.T * protocol.dt)
    off = 0
    for k, (p, g) in enumerate(zip(mlp.params, grads)):
        p -= (protocol.gammas[k] * p + g) * protocol.dt
        if noise is not None:
            p += amp * noise[:, off:off + sizes[k]].reshape(p.shape)
        off += sizes[k]
    state.epoch += 1
    return loss


@dataclass
class ChainResult:
    mean: np.ndarray  # pooled over seeds, (P,) or (P, out)
    seed_means: np.ndarray  # (S, P, out)
    series: np.ndarray  # (n_kept, S, P, out)
    series_epochs: np.ndarray
    loss_trace: np.ndarray  # mean train loss per epoch across seeds
    burn_in_ok: bool
    state: ChainState
    seeds: tuple = ()

    def output_matrix(self, probe=0, channel=0):
        """F[seed, time] for one probe point, as used by the ergodicity check."""
        return self.series[:, :, probe, channel].T


def run_chain(protocol: TrainProtocol, mlp: MLP | ChainState, X, y, probes, state=None,
              curvature_check=True, on_sample=None) -> ChainResult:
    """Run every seed to ``protocol.n_epochs``, averaging thinned probe outputs after burn-in.

    Pass a ChainState (from ``ChainState.load``) to continue a chain.
    ``on_sample(state)`` is called after every kept sample.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    if isinstance(mlp, ChainState):
        state = mlp
    y2 = np.asarray(y, dtype=float)
    n_out = 1 if y2.ndim == 1 else y2.shape[1]
    if state is None:
        state = init_state(mlp, protocol, len(probes), n_out)
    stiff = protocol.dt * max(protocol.gammas)
    if curvature_check and state.epoch == 0:
        stiff = protocol.dt * stiffness_estimate(state.mlp, X, y2, protocol)
    if stiff > 0.1:
        warnings.warn(f"dt * (gamma + curvature) = {stiff:.3f} > 0.1; the discretization may be unstable", RuntimeWarning)
    while state.epoch < protocol.n_epochs:
        loss = langevin_step(state, protocol, X, y2)
        state.loss_trace.append(float(np.mean(loss)))
        e = state.epoch  # epochs completed
        if e > protocol.burn_in and (e - protocol.burn_in) % protocol.thin == 0:
            out = forward(state.mlp, probes)
            if not np.all(np.isfinite(out)):
                raise DivergenceError(f"non-finite outputs at epoch {e}", epoch=e)
            state.sums += out
            state.count += 1
            state.series.append(out.copy())
            state.series_epochs.append(e)
            if on_sample is not None:
                on_sample(state)
    if state.count == 0:
        raise InsufficientDataError("no samples kept; increase n_epochs or reduce thin/burn_in")
    seed_means = state.sums / state.count
    pooled = seed_means.mean(axis=0)
    if n_out == 1:
        pooled = pooled[:, 0]
    lt = np.asarray(state.loss_trace)
    return ChainResult(pooled, seed_means, np.asarray(state.series), np.asarray(state.series_epochs),
                       lt, burn_in_check(lt, protocol.burn_in), state, protocol.seeds)


def burn_in_check(loss_trace, burn_in, tol=0.05):
    """Advisory: train loss at the end of burn-in within tol of its tail mean."""
    lt = np.asarray(loss_trace, dtype=float)
    if burn_in <= 0 or burn_in >= len(lt):
        return True
    tail = lt[burn_in:].mean()
    window = lt[max(0, burn_in - max(1, burn_in // 10)):burn_in].mean()
    return bool(abs(window - tail) <= tol * abs(tail) + 1e-300)


# ----------------------------------------------------------------------------
# diagnostics


def autocorrelation(series, max_lag=None, c=5.0):
    """Biased ACF (FFT) and integrated autocorrelation time tau = 1 + 2 sum rho.

    The summation window W is the smallest lag with W >= c * tau(W).
    Returns (acf[0..max_lag], tau).
    """
    x = np.asarray(series, dtype=float).ravel()
    n = len(x)
    if max_lag is None:
        max_lag = n // 10
    if max_lag < 1 or n < 10 * max_lag:
        raise InsufficientDataError(f"series of length {n} too short for max_lag={max_lag} (need >= {10 * max_lag})")
    x = x - x.mean()
    var = np.dot(x, x) / n
    if var <= 0:
        raise ValueError("constant series: autocorrelation undefined")
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acov = np.fft.irfft(f * np.conj(f), m)[: max_lag + 1] / n
    rho = acov / acov[0]
    tau = 1.0
    for W in range(1, max_lag + 1):
        tau = 1.0 + 2.0 * np.sum(rho[1:W + 1])
        if W >= c * tau:
            break
    return rho, float(tau)


@dataclass
class ErgodicityResult:
    slope: float
    intercept: float
    block_sizes: np.ndarray
    variances: np.ndarray
    n_blocks: np.ndarray


def default_block_plan(n_time, min_blocks=8, n_sizes=8):
    top = n_time // min_blocks
    if top < 2:
        raise InsufficientDataError(f"need at least {2 * min_blocks} time steps, got {n_time}")
    sizes = np.unique(np.round(np.geomspace(1, top, n_sizes)).astype(int))
    return sizes


def ergodicity_check(F, block_sizes=None, seeds_per_block=1, min_blocks=8) -> ErgodicityResult:
    """Empirical variance of block means vs block length, with a log-log fit.

    F has one row per seed (or a stack (P, S, T) of probes, averaged in the
    fit).  Blocks are non-overlapping windows of ``block_sizes`` epochs across
    groups of ``seeds_per_block`` seeds.  Ergodic dynamics give slope -1.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim == 2:
        F = F[None]
    P, S, Tn = F.shape
    if seeds_per_block < 1 or S < seeds_per_block:
        raise InsufficientDataError("not enough seeds for the requested group size")
    sizes = default_block_plan(Tn, min_blocks) if block_sizes is None else np.asarray(block_sizes, int)
    groups = S // seeds_per_block
    variances, counts = [], []
    for b in sizes:
        nb = (Tn // b) * groups
        if nb < min_blocks:
            raise InsufficientDataError(
                f"block size {b} yields {nb} blocks; need >= {min_blocks} "
                f"(max block size {Tn * groups // min_blocks})")
        G = F[:, : groups * seeds_per_block, : (Tn // b) * b]
        G = G.reshape(P, groups, seeds_per_block, Tn // b, b)
        means = G.mean(axis=(2, 4)).reshape(P, -1)
        variances.append(means.var(axis=1, ddof=1).mean())
        counts.append(nb)
    v = np.asarray(variances)
    slope, intercept = np.polyfit(np.log10(sizes), np.log10(v), 1)
    return ErgodicityResult(float(slope), float(intercept), sizes, v, np.asarray(counts))
