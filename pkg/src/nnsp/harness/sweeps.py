"""Width sweeps, train-set-size sweeps, EK checks and ergodicity runs."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .._validation import DivergenceError
from ..contractions import build_cumulant_operator
from ..equivalent_kernel import build_spectrum, ek_fwc_mean, ek_mean, kernel_evaluator, sphere_sampler
from ..gp_inference import finite_width_posterior, gp_posterior
from ..kernels import NetworkSpec, output_kernel
from ..langevin import MLP, TrainProtocol, autocorrelation, ergodicity_check, run_chain
from .analysis import fit_slope, relative_mse, top_fraction
from .config import ExperimentConfig
from .datasets import gen_quadratic_dataset, philox, sample_sphere
from .persistence import write_csv

# degree of positive homogeneity of each activation: phi(c z) = c^p phi(z)
HOMOGENEITY = {"quadratic": 2, "relu": 1, "linear": 1}


@dataclass
class SweepResult:
    kind: str
    header: list
    rows: list  # list of dicts keyed by header
    fits: dict = field(default_factory=dict)  # name -> SlopeFit
    summary: dict = field(default_factory=dict)

    def column(self, name, where=None):
        rows = self.rows if where is None else [r for r in self.rows if where(r)]
        return np.array([r[name] for r in rows])

    def to_csv(self, path):
        write_csv(path, self.header, [[r[h] for h in self.header] for r in self.rows])

    def fits_to_csv(self, path):
        header = ["name", "slope", "slope_se", "intercept", "n_points", "x_min", "x_max"]
        write_csv(path, header, [[k, f.slope, f.slope_se, f.intercept, f.n_points, f.x_min, f.x_max]
                                 for k, f in sorted(self.fits.items())])


def _log(progress, msg):
    if progress:
        print(msg, file=sys.stderr, flush=True)


def network_spec(cfg: ExperimentConfig) -> NetworkSpec:
    return NetworkSpec(cfg["network.depth"], cfg["network.activation"], cfg["network.weight_var"],
                       cfg["network.readout_var"], cfg["network.bias_var"])


def layer_variances(cfg: ExperimentConfig, d, N):
    """Scaled variances (weights per hidden layer, then readout) for a width-N net.

    With ``network.balanced`` and one bias-free hidden layer of a homogeneous
    activation, the pair (weight_var, readout_var) is rescaled so that every
    weight has the same prior variance (hence the same weight decay) while
    the kernel and the cumulant stay unchanged.
    """
    wv, rv = cfg["network.weight_var"], cfg["network.readout_var"]
    act = cfg["network.activation"]
    depth = cfg["network.depth"]
    if cfg["network.balanced"] and depth == 1 and cfg["network.bias_var"] == 0 and act in HOMOGENEITY:
        p = HOMOGENEITY[act]
        invariant = rv * wv ** p
        wv = (invariant * d / N) ** (1.0 / (p + 1))
        rv = wv * N / d
    return (wv,) * depth + (rv,)


def train_network(cfg: ExperimentConfig, X, y, probes, N, epochs, seeds, curvature_check=True):
    d = X.shape[1]
    widths = (d,) + (N,) * cfg["network.depth"] + (1,)
    scaled = layer_variances(cfg, d, N)
    gammas = [2 * cfg["train.sigma2"] * fi / v for v, fi in zip(scaled, widths[:-1])]
    dt = cfg["train.dt_scale"] / max(gammas)
    proto = TrainProtocol.for_network(widths, scaled, cfg["train.sigma2"], dt, epochs,
                                      burn_in=int(cfg["train.burn_frac"] * epochs), thin=cfg["train.thin"],
                                      seeds=seeds, master_seed=cfg["experiment.master_seed"])
    net = MLP.from_prior(widths, proto.prior_variances(), cfg["network.activation"], proto.seeds,
                         proto.master_seed)
    return run_chain(proto, net, X, y, probes, curvature_check=curvature_check), proto


def theory_predictions(cfg, X_train, y_train, X_test, sigma2=None, spec=None):
    """GP posterior with correction terms (infinite width) at the test points."""
    spec = spec or network_spec(cfg)
    sigma2 = cfg["train.sigma2"] if sigma2 is None else sigma2
    K = output_kernel(spec, np.vstack([X_train, X_test])).values
    n = len(X_train)
    op = build_cumulant_operator(X_train, X_test, spec)
    return finite_width_posterior(K[:n, :n], K[n:, :n], np.diag(K)[n:], y_train, sigma2, op)


WIDTH_HEADER = ["width", "epochs", "dt", "diverged", "burn_in_ok",
                "gp_dnn_mse", "gp_dnn_mse_raw", "gp_dnn_se",
                "fwc_dnn_mse", "fwc_dnn_mse_raw", "fwc_dnn_se",
                "dnn_target_mse", "dnn_target_mse_raw", "predicted_gp_dnn_mse", "seed_bias"]


def run_width_sweep(cfg: ExperimentConfig, progress=False) -> SweepResult:
    """Train at each width, compare pooled outputs with the GP and GP + FWC predictions.

    MSE columns are relative to the mean squared pooled DNN output; the plain
    columns have the across-seed sampling bias subtracted, ``_raw`` do not.
    """
    widths = sorted(cfg["sweep.widths"])
    if len(widths) < 4:
        raise ValueError("width sweep needs at least 4 widths")
    ds = gen_quadratic_dataset(cfg["dataset.d"], cfg["dataset.n_train"], cfg["dataset.n_test"],
                               cfg["dataset.seed"], cfg["dataset.normalize"])
    post = theory_predictions(cfg, ds.X_train, ds.y_train, ds.X_test)
    gp, fU = post.gp_mean, post.fwc_mean
    rows = []
    S = cfg["train.n_seeds"]
    for N in widths:
        E = cfg.epochs_for_width(N)
        seeds = [1000 * N + s for s in range(S)]
        t0 = time.perf_counter()
        row = dict.fromkeys(WIDTH_HEADER, float("nan"))
        row.update(width=N, epochs=E, diverged=False, burn_in_ok=True)
        try:
            res, proto = train_network(cfg, ds.X_train, ds.y_train, ds.X_test, N, E, seeds)
        except DivergenceError as exc:
            row["diverged"] = True
            _log(progress, f"width {N}: diverged ({exc})")
            rows.append(row)
            continue
        sm = res.seed_means[:, :, 0]
        norm = float(np.mean(sm.mean(axis=0) ** 2))
        g = relative_mse(gp, sm, norm)
        f = relative_mse(gp + fU / N, sm, norm)
        t = relative_mse(ds.y_test, sm, norm)
        row.update(dt=proto.dt, burn_in_ok=res.burn_in_ok,
                   gp_dnn_mse=g.subtracted, gp_dnn_mse_raw=g.raw, gp_dnn_se=g.se,
                   fwc_dnn_mse=f.subtracted, fwc_dnn_mse_raw=f.raw, fwc_dnn_se=f.se,
                   dnn_target_mse=t.subtracted, dnn_target_mse_raw=t.raw,
                   predicted_gp_dnn_mse=float(np.mean((fU / N) ** 2)) / norm, seed_bias=g.bias)
        rows.append(row)
        _log(progress, f"width {N}: {E} epochs in {time.perf_counter() - t0:.0f}s, "
                       f"GP-DNN {g.subtracted:.3e}, FWC-DNN {f.subtracted:.3e}")
    result = SweepResult("width_sweep", WIDTH_HEADER, rows)
    _width_summary(result, cfg)
    return result


def _width_summary(result: SweepResult, cfg):
    ok = [r for r in result.rows if not r["diverged"]]
    fit_widths = top_fraction([r["width"] for r in ok], cfg["sweep.fit_fraction"]) if len(ok) >= 2 else []
    sel = [r for r in ok if r["width"] in fit_widths]
    summ = {"fit_widths": fit_widths, "diverged_widths": [r["width"] for r in result.rows if r["diverged"]]}
    for name in ("gp_dnn_mse", "fwc_dnn_mse", "gp_dnn_mse_raw", "fwc_dnn_mse_raw"):
        vals = [r[name] for r in sel]
        if len(sel) >= 2 and all(v > 0 for v in vals):
            result.fits[name] = fit_slope([r["width"] for r in sel], vals, cfg["sweep.bootstrap"],
                                          cfg["experiment.master_seed"])
    if "gp_dnn_mse" in result.fits:
        summ["gp_dnn_slope"] = result.fits["gp_dnn_mse"].slope
        summ["gp_dnn_slope_se"] = result.fits["gp_dnn_mse"].slope_se
    if ok:
        last = max(ok, key=lambda r: r["width"])
        # conservative: the FWC-DNN gap is taken one standard error above its estimate
        upper = max(last["fwc_dnn_mse"], 0.0) + last["fwc_dnn_se"]
        summ["largest_width"] = last["width"]
        summ["gp_over_fwc_at_largest"] = last["gp_dnn_mse"] / upper if upper > 0 else float("inf")
        summ["gp_over_fwc_at_largest_raw"] = last["gp_dnn_mse_raw"] / last["fwc_dnn_mse_raw"]
        cross = [r["width"] for r in ok if r["fwc_dnn_mse"] > r["gp_dnn_mse"]]
        summ["fwc_worse_widths"] = cross
    result.summary = summ


N_HEADER = ["sigma2", "n", "abs_fwc_mean", "abs_fwc_mean_sd", "gp_rmse", "gp_rmse_sd", "n_datasets"]


def run_n_sweep(cfg: ExperimentConfig, progress=False) -> SweepResult:
    """|f_U| averaged over a fixed test set and the GP RMSE against the target, per n.

    Pure inference.  Each dataset seed fixes A and the test points; train
    sets of different sizes share nothing but those.
    """
    grid = sorted(cfg["sweep.n_grid"])
    if grid[-1] < 10 * grid[0]:
        raise ValueError("n grid must span at least one decade")
    spec = network_spec(cfg)
    rows = []
    for s2 in cfg["sweep.sigma2_grid"]:
        for n in grid:
            t0 = time.perf_counter()
            fu, rm = [], []
            for k in range(cfg["sweep.n_datasets"]):
                ds = gen_quadratic_dataset(cfg["dataset.d"], n, cfg["sweep.n_test_points"],
                                           cfg["dataset.seed"] + k, cfg["dataset.normalize"])
                post = theory_predictions(cfg, ds.X_train, ds.y_train, ds.X_test, s2, spec)
                fu.append(np.mean(np.abs(post.fwc_mean)))
                rm.append(np.sqrt(np.mean((post.gp_mean - ds.y_test) ** 2)))
            rows.append(dict(sigma2=s2, n=n, abs_fwc_mean=float(np.mean(fu)), abs_fwc_mean_sd=float(np.std(fu)),
                             gp_rmse=float(np.mean(rm)), gp_rmse_sd=float(np.std(rm)), n_datasets=len(fu)))
            _log(progress, f"sigma2={s2} n={n}: |f_U|={np.mean(fu):.4g} rmse={np.mean(rm):.4g} "
                           f"({time.perf_counter() - t0:.1f}s)")
    result = SweepResult("n_sweep", N_HEADER, rows)
    summ = {}
    lo = grid[-1] / 10.0
    k_small = cfg["sweep.small_n_points"]
    for s2 in cfg["sweep.sigma2_grid"]:
        sel = [r for r in rows if r["sigma2"] == s2]
        big = [r for r in sel if r["n"] >= lo]
        for name in ("abs_fwc_mean", "gp_rmse"):
            fit = fit_slope([r["n"] for r in big], [r[name] for r in big], cfg["sweep.bootstrap"],
                            cfg["experiment.master_seed"])
            result.fits[f"{name}@sigma2={s2}"] = fit
        small = sel[:k_small]
        summ[f"small_n_trend@sigma2={s2}"] = float(np.polyfit(
            np.log10([r["n"] for r in small]), np.log10([r["abs_fwc_mean"] for r in small]), 1)[0])
    s2s = sorted(cfg["sweep.sigma2_grid"])
    if len(s2s) >= 2:
        lo_rows = {r["n"]: r for r in rows if r["sigma2"] == s2s[0]}
        hi_rows = {r["n"]: r for r in rows if r["sigma2"] == s2s[-1]}
        summ["fwc_higher_at_larger_sigma2"] = [n for n in grid if hi_rows[n]["abs_fwc_mean"] > lo_rows[n]["abs_fwc_mean"]]
        summ["rmse_higher_at_larger_sigma2"] = [n for n in grid if hi_rows[n]["gp_rmse"] > lo_rows[n]["gp_rmse"]]
    result.summary = summ
    return result


EK_HEADER = ["id", "ek_mean", "ek_fwc_mean", "gp_mean_avg", "gp_mean_sd", "target", "ek_mean_infinite_n"]


def run_ek_check(cfg: ExperimentConfig, progress=False):
    """EK mean against the dataset-averaged GP mean, and the n-scaling of the EK correction.

    Returns (per-point SweepResult, scaling SweepResult, spectral model).
    """
    d = cfg["dataset.d"]
    spec = network_spec(cfg)
    s2 = cfg["train.sigma2"]
    n = cfg["ek.n"]
    seed = cfg["dataset.seed"]
    base = gen_quadratic_dataset(d, 1, cfg["ek.n_test"], seed, cfg["dataset.normalize"])
    g, Xt = base.target, base.X_test
    kern = kernel_evaluator(spec)
    model = build_spectrum(kern, sphere_sampler(d), cfg["ek.M"], seed=seed)
    t0 = time.perf_counter()
    gps = []
    for k in range(cfg["ek.draws"]):
        Xtr = sample_sphere(n, d, philox(seed, 100 + k))
        K = kern(np.vstack([Xtr, Xt]), np.vstack([Xtr, Xt]))
        gps.append(gp_posterior(K[:n, :n], K[n:, :n], np.diag(K)[n:], g(Xtr), s2)[0])
    gps = np.asarray(gps)
    gp_avg = gps.mean(axis=0)
    ek = ek_mean(model, g, n, s2, Xt)
    ek_inf = ek_mean(model, g, 10.0 ** 12, s2, Xt)
    fwc = ek_fwc_mean(model, spec, g, n, s2, Xt, mc_nodes=_nodes(cfg), seed=seed + 1)
    _log(progress, f"EK vs GP over {len(gps)} draws in {time.perf_counter() - t0:.1f}s")
    rows = [dict(id=i, ek_mean=ek[i], ek_fwc_mean=fwc[i], gp_mean_avg=gp_avg[i], gp_mean_sd=gps[:, i].std(ddof=1),
                 target=g(Xt[i])[0], ek_mean_infinite_n=ek_inf[i]) for i in range(len(Xt))]
    point = SweepResult("ek_check", EK_HEADER, rows)
    h = model.filter_factors(n, s2)
    proj = model.eigenfunctions(Xt) @ model.project(g(model.sample_points))
    point.summary = {
        "n": n,
        "draws": len(gps),
        "rank": model.rank,
        "ek_vs_gp_rel_rmse": float(np.sqrt(np.mean((ek - gp_avg) ** 2) / np.mean(gp_avg ** 2))),
        "filter_min": float(h.min()),
        "filter_max": float(h.max()),
        "infinite_n_vs_projection": float(np.max(np.abs(ek_inf - proj))),
    }
    scal_rows = []
    for m in sorted(cfg["ek.n_grid"]):
        f = ek_fwc_mean(model, spec, g, m, s2, Xt, mc_nodes=_nodes(cfg), seed=seed + 1)
        scal_rows.append(dict(n=m, abs_ek_fwc_mean=float(np.mean(np.abs(f)))))
    scaling = SweepResult("ek_scaling", ["n", "abs_ek_fwc_mean"], scal_rows)
    if len(scal_rows) >= 2:
        scaling.fits["abs_ek_fwc_mean"] = fit_slope([r["n"] for r in scal_rows],
                                                    [r["abs_ek_fwc_mean"] for r in scal_rows],
                                                    cfg["sweep.bootstrap"], cfg["experiment.master_seed"])
    return point, scaling, model


def _nodes(cfg):
    v = cfg["ek.nodes"]
    return v if v == "samples" else int(v)


@dataclass
class ErgodicityReport:
    result: object  # ErgodicityResult
    tau: float
    chain: object
    counterexample: object


def run_ergodicity(cfg: ExperimentConfig, progress=False) -> ErgodicityReport:
    """Train one width, then apply the block-variance procedure to the probe outputs.

    Block sizes start at five integrated autocorrelation times (in thinned
    steps) so the fit is taken in the regime where block means decorrelate.
    A synthetic series with a per-seed offset runs through the same plan.
    """
    ds = gen_quadratic_dataset(cfg["dataset.d"], cfg["dataset.n_train"], cfg["ergodicity.n_probes"],
                               cfg["dataset.seed"], cfg["dataset.normalize"])
    sub = ExperimentConfig(dict(cfg.values), cfg.preset)
    sub["train.thin"] = cfg["ergodicity.thin"]
    sub["train.burn_frac"] = cfg["train.burn_frac"]
    N = cfg["ergodicity.width"]
    seeds = [s for s in range(cfg["ergodicity.n_seeds"])]
    t0 = time.perf_counter()
    chain, _ = train_network(sub, ds.X_train, ds.y_train, ds.X_test, N, cfg["ergodicity.epochs"], seeds)
    _log(progress, f"ergodicity chain: {cfg['ergodicity.epochs']} epochs in {time.perf_counter() - t0:.0f}s")
    F = np.stack([chain.output_matrix(p) for p in range(ds.X_test.shape[0])])  # (P, S, T)
    Tn = F.shape[2]
    taus = [autocorrelation(F[p, s], max_lag=Tn // 10)[1] for p in range(F.shape[0]) for s in range(F.shape[1])]
    tau = float(np.median(taus))
    sizes = block_plan(tau, Tn)
    res = ergodicity_check(F, sizes)
    rng = philox(cfg["experiment.master_seed"], 11)
    broken = rng.standard_normal((F.shape[1], 1)) + rng.standard_normal((F.shape[1], Tn))
    bad = ergodicity_check(broken, sizes)
    return ErgodicityReport(res, tau, chain, bad)


def block_plan(tau, n_time, min_blocks=8, n_sizes=8):
    lo = max(1, int(math.ceil(5 * tau)))
    hi = n_time // min_blocks
    if hi <= lo:
        lo = max(1, hi // 4)
    return np.unique(np.round(np.geomspace(lo, hi, n_sizes)).astype(int))
