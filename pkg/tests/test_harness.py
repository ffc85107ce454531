import json

import numpy as np
import pytest

from nnsp._validation import ConfigError, InsufficientDataError
from nnsp.harness.analysis import fit_slope, relative_mse, top_fraction
from nnsp.harness.cli import main
from nnsp.harness.config import ExperimentConfig
from nnsp.harness.datasets import QuadraticTarget, gen_quadratic_dataset, philox, sample_sphere
from nnsp.harness.persistence import read_csv, write_csv

TINY = """
# small enough for unit tests
dataset.d = 4
dataset.n_train = 10
dataset.n_test = 4
network.activation = quadratic
train.width = 8
train.epochs = 300
train.epochs_ref_width = 16
train.min_epochs = 200
train.n_seeds = 3
train.thin = 5
sweep.widths = 8, 12, 16, 24
sweep.n_grid = 8, 16, 32, 96
sweep.n_datasets = 2
sweep.n_test_points = 10
sweep.bootstrap = 20
cumulant.n_points = 4
ek.M = 256
ek.n = 32
ek.draws = 3
ek.n_test = 5
ek.n_grid = 32, 64
ergodicity.epochs = 6000
ergodicity.width = 8
ergodicity.n_seeds = 8
ergodicity.n_probes = 2
ergodicity.thin = 2
"""


# --- config -----------------------------------------------------------------


def test_config_defaults_and_presets():
    q = ExperimentConfig()
    f = ExperimentConfig(preset="full")
    assert q["train.sigma2"] == f["train.sigma2"]
    assert f["sweep.widths"][-1] > q["sweep.widths"][-1]
    with pytest.raises(ConfigError):
        ExperimentConfig(preset="medium")


def test_config_unknown_key_suggests_nearest():
    with pytest.raises(ConfigError, match="did you mean 'train.sigma2'"):
        ExperimentConfig({"train.sigma": 0.1})
    with pytest.raises(ConfigError, match="cfg:2"):
        ExperimentConfig.from_text("train.sigma2 = 0.3\nnetwork.widht = 4\n", source="cfg")


def test_config_parse_errors():
    with pytest.raises(ConfigError, match="expected 'section.key = value'"):
        ExperimentConfig.from_text("train.sigma2 0.3")
    with pytest.raises(ConfigError, match="bad value"):
        ExperimentConfig.from_text("train.epochs = lots")
    with pytest.raises(ConfigError, match="bad value"):
        ExperimentConfig.from_text("experiment.plots = maybe")
    with pytest.raises(ConfigError):
        ExperimentConfig({"experiment.kind": "nonsense"})


def test_config_text_roundtrip_and_hash():
    cfg = ExperimentConfig.from_text(TINY + "train.epochs = 1e4\nexperiment.plots = off\n")
    assert cfg["train.epochs"] == 10000 and cfg["experiment.plots"] is False
    assert cfg["sweep.n_grid"] == [8, 16, 32, 96]
    back = ExperimentConfig.from_text(cfg.to_text())
    assert back.values == cfg.values
    assert back.hash() == cfg.hash()
    back["train.sigma2"] = 0.5
    assert back.hash() != cfg.hash()


def test_epochs_for_width():
    cfg = ExperimentConfig({"train.epochs": 200000, "train.epochs_ref_width": 512, "train.min_epochs": 20000})
    assert cfg.epochs_for_width(512) == 200000
    assert cfg.epochs_for_width(256) == 50000
    assert cfg.epochs_for_width(16) == 20000


# --- datasets ---------------------------------------------------------------


def test_dataset_determinism_and_streams():
    a = gen_quadratic_dataset(5, 20, 7, seed=3)
    b = gen_quadratic_dataset(5, 20, 7, seed=3)
    assert np.array_equal(a.X_train, b.X_train) and np.array_equal(a.y_test, b.y_test)
    c = gen_quadratic_dataset(5, 40, 7, seed=3)
    assert np.array_equal(a.X_test, c.X_test) and np.array_equal(a.target.A, c.target.A)
    assert not np.array_equal(a.X_train, gen_quadratic_dataset(5, 20, 7, seed=4).X_train)
    assert np.allclose(np.linalg.norm(a.X_train, axis=1), np.sqrt(5))
    with pytest.raises(ValueError):
        gen_quadratic_dataset(1, 5, 5)


def test_target_is_normalized():
    d = 6
    ds = gen_quadratic_dataset(d, 1, 1, seed=5)
    X = sample_sphere(400000, d, philox(9))
    m2 = np.mean(ds.target(X) ** 2)
    assert m2 == pytest.approx(1.0, rel=0.02)
    A = philox(1).standard_normal((d, d))
    raw = np.mean(QuadraticTarget(A)(X) ** 2)
    assert QuadraticTarget.second_moment(A) == pytest.approx(raw, rel=0.02)


# --- analysis ---------------------------------------------------------------


def test_fit_slope_exact_power_law():
    x = np.array([16, 32, 64, 128, 256.0])
    fit = fit_slope(x, 3.0 * x ** -2, n_boot=50)
    assert fit.slope == pytest.approx(-2.0, abs=1e-12)
    assert fit.slope_se < 1e-10
    assert fit.predict(100.0) == pytest.approx(3e-4, rel=1e-10)
    with pytest.raises(InsufficientDataError):
        fit_slope([4, 4, 4], [1, 2, 3])
    with pytest.raises(ValueError):
        fit_slope([1, 2, 3], [1, 0, 3])


def test_top_fraction():
    assert top_fraction([512, 16, 64, 32, 128, 256]) == [128, 256, 512]
    assert top_fraction([1, 2, 3], 0.1) == [2, 3]


def test_relative_mse_bias_subtraction():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal(50)
    # each seed mean is the reference plus independent noise of variance v
    v, S = 0.04, 8
    est = []
    for _ in range(400):
        seeds = ref + np.sqrt(v) * rng.standard_normal((S, 50))
        est.append(relative_mse(ref, seeds, norm=1.0))
    raw = np.mean([e.raw for e in est])
    sub = np.mean([e.subtracted for e in est])
    assert raw == pytest.approx(v / S, rel=0.05)
    assert abs(sub) < 0.05 * v / S
    with pytest.raises(InsufficientDataError):
        relative_mse(ref, ref[None].repeat(2, 0))


def test_csv_writer(tmp_path):
    write_csv(tmp_path / "a.csv", ["x", "flag"], [[1.5, True], [2, False]])
    assert (tmp_path / "a.csv").read_bytes() == b"x,flag\r\n1.5,true\r\n2,false\r\n"
    rows = read_csv(tmp_path / "a.csv")
    assert rows[1] == {"x": "2", "flag": "false"}


# --- CLI --------------------------------------------------------------------


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def _run(tiny, out, command, *extra):
    return main([command, "--config", str(tiny), "--out", str(out), "-q", "--no-plots", *extra])


def test_cli_usage_errors(tmp_path, tiny, capsys):
    assert main(["kernel", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.sigam2 = 0.1\n")
    assert main(["kernel", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert "did you mean" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main(["kernel", "--seed", "-3", "--config", str(tiny)]) == 1
    with open(tiny, "a") as fh:
        fh.write("sweep.widths = 8, 16\n")
    assert _run(tiny, tmp_path / "w", "sweep-width") == 1
    assert "at least 4 widths" in capsys.readouterr().err


def test_cli_numerical_failure_exit_code(tmp_path, tiny):
    with open(tiny, "a") as fh:
        fh.write("train.dt_scale = 50\ntrain.epochs = 2000\ntrain.min_epochs = 2000\n")
    assert _run(tiny, tmp_path / "o", "train") == 2


@pytest.mark.parametrize("command,outputs", [
    ("kernel", ["kernel.bin", "kernel.csv"]),
    ("cumulant", ["cumulant.bin", "cumulant.csv"]),
    ("fwc-predict", ["predictions.csv"]),
    ("train", ["series.csv", "outputs.csv", "checkpoint.npz"]),
    ("sweep-width", ["width_sweep.csv", "width_fits.csv"]),
    ("sweep-n", ["n_sweep.csv", "n_fits.csv"]),
    ("ek", ["ek_report.csv", "ek_scaling.csv", "ek_fits.csv", "ek_spectrum.csv"]),
    ("ergodicity", ["ergodicity.csv", "series.csv"]),
])
def test_cli_commands_are_reproducible(tmp_path, tiny, command, outputs):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(tiny, a, command) == 0
    assert _run(tiny, b, command) == 0
    man = json.loads((a / "manifest.json").read_text())
    assert man["command"] == command
    assert sorted(man["outputs"]) == sorted(outputs)
    for name in outputs + ["manifest.json", "config.txt"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert ExperimentConfig.from_file(a / "config.txt").hash() == man["config_hash"]


def test_cli_seed_changes_training(tmp_path, tiny):
    _run(tiny, tmp_path / "a", "train", "--seed", "1")
    _run(tiny, tmp_path / "b", "train", "--seed", "2")
    assert (tmp_path / "a" / "series.csv").read_bytes() != (tmp_path / "b" / "series.csv").read_bytes()


def test_cli_plots(tmp_path, tiny):
    assert main(["sweep-n", "--config", str(tiny), "--out", str(tmp_path), "-q"]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    svg = tmp_path / "n_sweep.svg"
    if "n_sweep.svg" in man["outputs"]:
        assert svg.read_text().lstrip().startswith("<")
