"""Command line entry point: ``nnsp <command> [--config FILE] [--out DIR] [--seed S] [--quick|--full]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .. import io as nio
from .._validation import ConfigError, DivergenceError, FactorizationError, NonConvergentError
from ..cumulants import FourthCumulant, default_provider
from ..kernels import last_hidden_kernel, output_kernel
from .config import ExperimentConfig
from .datasets import gen_quadratic_dataset
from .persistence import loglog_svg, write_csv, write_manifest
from .sweeps import (network_spec, run_ek_check, run_ergodicity, run_n_sweep, run_width_sweep,
                     theory_predictions, train_network)

COMMANDS = ("kernel", "cumulant", "fwc-predict", "train", "sweep-width", "sweep-n", "ek", "ergodicity")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="nnsp", description="Finite-width corrections to NNGP regression and Langevin checks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key-value config file (section.key = value)")
    p.add_argument("--out", help="output directory (default: experiment.output_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides experiment.master_seed)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--quick", action="store_true", help="reduced grids and epochs (default)")
    g.add_argument("--full", action="store_true", help="large grids and long chains (hours)")
    p.add_argument("--no-plots", action="store_true", help="skip SVG plots")
    p.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")
    return p


def load_config(args):
    preset = "full" if args.full else "quick"
    if args.config is None:
        cfg = ExperimentConfig(preset=preset)
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = ExperimentConfig.from_file(path, preset)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg["experiment.master_seed"] = args.seed
    if args.no_plots:
        cfg["experiment.plots"] = False
    return cfg


def _dataset(cfg):
    return gen_quadratic_dataset(cfg["dataset.d"], cfg["dataset.n_train"], cfg["dataset.n_test"],
                                 cfg["dataset.seed"], cfg["dataset.normalize"])


def cmd_kernel(cfg, out, progress):
    ds = _dataset(cfg)
    K = output_kernel(network_spec(cfg), ds.X_train).values
    nio.save_kernel(out / "kernel.bin", K)
    nio.kernel_to_csv(out / "kernel.csv", K)
    return [out / "kernel.bin", out / "kernel.csv"], {"n": len(K), "min_eigenvalue": float(np.linalg.eigvalsh(K)[0])}


def cmd_cumulant(cfg, out, progress):
    ds = _dataset(cfg)
    m = min(cfg["cumulant.n_points"], len(ds.X_train))
    spec = network_spec(cfg)
    L = last_hidden_kernel(spec, ds.X_train[:m])
    U = FourthCumulant.from_provider(default_provider(spec.activation), L, spec.readout_var)
    nio.save_cumulant(out / "cumulant.bin", U)
    nio.cumulant_to_csv(out / "cumulant.csv", U)
    return [out / "cumulant.bin", out / "cumulant.csv"], {"n_points": m, "stored_values": len(U.values)}


def cmd_fwc_predict(cfg, out, progress):
    ds = _dataset(cfg)
    post = theory_predictions(cfg, ds.X_train, ds.y_train, ds.X_test)
    post.set_width(cfg["train.width"])
    post.to_csv(out / "predictions.csv", targets=ds.y_test)
    return [out / "predictions.csv"], {"width": cfg["train.width"], "negative_variances": int(post.negative_var.sum())}


def cmd_train(cfg, out, progress):
    ds = _dataset(cfg)
    N = cfg["train.width"]
    E = cfg.epochs_for_width(N)
    seeds = list(range(cfg["train.n_seeds"]))
    res, proto = train_network(cfg, ds.X_train, ds.y_train, ds.X_test, N, E, seeds)
    nio.series_to_csv(out / "series.csv", res)
    post = theory_predictions(cfg, ds.X_train, ds.y_train, ds.X_test).set_width(N)
    rows = [[i, res.mean[i], post.gp_mean[i], post.combined_mean[i], ds.y_test[i]] for i in range(len(ds.y_test))]
    write_csv(out / "outputs.csv", ["id", "dnn_mean", "gp_mean", "fwc_mean", "target"], rows)
    res.state.save(out / "checkpoint.npz")
    return ([out / "series.csv", out / "outputs.csv", out / "checkpoint.npz"],
            {"width": N, "epochs": E, "dt": proto.dt, "burn_in_ok": res.burn_in_ok})


def cmd_sweep_width(cfg, out, progress):
    res = run_width_sweep(cfg, progress)
    res.to_csv(out / "width_sweep.csv")
    res.fits_to_csv(out / "width_fits.csv")
    files = [out / "width_sweep.csv", out / "width_fits.csv"]
    if cfg["experiment.plots"]:
        ok = [r for r in res.rows if not r["diverged"]]
        x = [r["width"] for r in ok]
        series = [("GP-DNN", x, [r["gp_dnn_mse"] for r in ok]), ("FWC-DNN", x, [r["fwc_dnn_mse"] for r in ok])]
        fits = [("GP-DNN fit", res.fits["gp_dnn_mse"])] if "gp_dnn_mse" in res.fits else []
        if loglog_svg(out / "width_sweep.svg", series, fits, "width N", "relative MSE"):
            files.append(out / "width_sweep.svg")
    return files, res.summary


def cmd_sweep_n(cfg, out, progress):
    res = run_n_sweep(cfg, progress)
    res.to_csv(out / "n_sweep.csv")
    res.fits_to_csv(out / "n_fits.csv")
    files = [out / "n_sweep.csv", out / "n_fits.csv"]
    if cfg["experiment.plots"]:
        series = []
        for s2 in cfg["sweep.sigma2_grid"]:
            sel = [r for r in res.rows if r["sigma2"] == s2]
            series.append((f"|f_U| sigma2={s2}", [r["n"] for r in sel], [r["abs_fwc_mean"] for r in sel]))
            series.append((f"GP RMSE sigma2={s2}", [r["n"] for r in sel], [r["gp_rmse"] for r in sel]))
        if loglog_svg(out / "n_sweep.svg", series, [], "train set size n", "value"):
            files.append(out / "n_sweep.svg")
    return files, res.summary


def cmd_ek(cfg, out, progress):
    point, scaling, model = run_ek_check(cfg, progress)
    point.to_csv(out / "ek_report.csv")
    scaling.to_csv(out / "ek_scaling.csv")
    scaling.fits_to_csv(out / "ek_fits.csv")
    model.to_csv(out / "ek_spectrum.csv")
    summ = dict(point.summary)
    if "abs_ek_fwc_mean" in scaling.fits:
        summ["ek_fwc_slope"] = scaling.fits["abs_ek_fwc_mean"].slope
    return [out / f for f in ("ek_report.csv", "ek_scaling.csv", "ek_fits.csv", "ek_spectrum.csv")], summ


def cmd_ergodicity(cfg, out, progress):
    rep = run_ergodicity(cfg, progress)
    r, b = rep.result, rep.counterexample
    rows = [[int(s), v, int(c), vb] for s, v, c, vb in zip(r.block_sizes, r.variances, r.n_blocks, b.variances)]
    write_csv(out / "ergodicity.csv", ["block_size", "block_mean_variance", "n_blocks", "broken_block_mean_variance"], rows)
    nio.series_to_csv(out / "series.csv", rep.chain)
    return ([out / "ergodicity.csv", out / "series.csv"],
            {"slope": r.slope, "tau_thinned": rep.tau, "broken_slope": b.slope})


HANDLERS = {
    "kernel": cmd_kernel,
    "cumulant": cmd_cumulant,
    "fwc-predict": cmd_fwc_predict,
    "train": cmd_train,
    "sweep-width": cmd_sweep_width,
    "sweep-n": cmd_sweep_n,
    "ek": cmd_ek,
    "ergodicity": cmd_ergodicity,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
    except (UsageError, ConfigError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"nnsp: error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out or cfg["experiment.output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    progress = not args.quiet
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            if not progress:
                warnings.simplefilter("ignore")
            files, summary = HANDLERS[args.command](cfg, out, progress)
    except (FactorizationError, NonConvergentError, DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"nnsp: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"nnsp: error: {exc}", file=sys.stderr)
        return 1
    manifest = write_manifest(out, cfg, args.command, files, summary)
    if progress:
        print(f"{args.command}: wrote {len(files)} files and {manifest.name} to {out} "
              f"in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
