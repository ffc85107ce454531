import numpy as np
import pytest

from nnsp._validation import FactorizationError, ShapeError
from nnsp.contractions import EntryCumulant, build_cumulant_operator
from nnsp.cumulants import QuadraticProvider, quadratic_V, sorted_tuples
from nnsp.gp_inference import (TrainSolve, combine, expected_test_loss, finite_width_posterior,
                               fwc_from_operator, fwc_mean, fwc_variance, gp_posterior, u_tilde_star,
                               u_tilde_star_star)
from nnsp.kernels import NetworkSpec, linear_kernel, quadratic_kernel, relu_kernel

from oracles import dense_U_quadratic, dense_gp, naive_fwc


def sphere(rng, n, d):
    x = rng.standard_normal((n, d))
    return np.sqrt(d) * x / np.linalg.norm(x, axis=1, keepdims=True)


def toy(n=3, T=2, d=4, seed=0, sigma2=0.3, readout_var=0.8):
    rng = np.random.default_rng(seed)
    X = sphere(rng, n + T, d)
    y = rng.standard_normal(n)
    L = linear_kernel(X).values
    K = quadratic_kernel(L, readout_var).values
    U = dense_U_quadratic(L, readout_var)
    return dict(X=X, y=y, L=L, K=K, U=U, n=n, T=T, sigma2=sigma2, readout_var=readout_var,
                Ktr=K[:n, :n], Ks=K[n:, :n], Kss=np.diag(K)[n:])


def slices(U, n):
    T = U.shape[0] - n
    return (U[:n, :n, :n, :n], np.stack([U[n + t, :n, :n, :n] for t in range(T)]),
            np.stack([U[n + t, n + t, :n, :n] for t in range(T)]))


# --- GP posterior -----------------------------------------------------------


def test_gp_matches_dense_solve():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((7, 9))
    K = A @ A.T
    y = rng.standard_normal(5)
    mean, var = gp_posterior(K[:5, :5], K[5:, :5], np.diag(K)[5:], y, 0.2)
    m2, v2 = dense_gp(K[:5, :5], K[5:, :5], np.diag(K)[5:], y, 0.2)
    assert np.allclose(mean, m2, rtol=1e-10, atol=0)
    assert np.allclose(var, v2, rtol=1e-10, atol=0)


def test_gp_limits():
    K = np.array([[2.0, 0.7], [0.7, 1.5]])
    mean, _ = gp_posterior(K[:1, :1], K[1:, :1], K[1, 1], np.array([1.3]), 1e-12)
    assert mean[0] == pytest.approx(1.3 * 0.7 / 2.0, rel=1e-9)
    mean, var = gp_posterior(K[:1, :1], K[1:, :1], K[1, 1], np.array([1.3]), 1e9 * 2.0)
    assert abs(mean[0]) < 1e-9 and var[0] == pytest.approx(1.5, rel=1e-9)


def test_train_solve_reconstructs_and_checks():
    rng = np.random.default_rng(2)
    A = rng.standard_normal((6, 6))
    s = TrainSolve(A @ A.T, rng.standard_normal(6), 0.1)
    assert s.reconstruction_error() < 1e-8
    with pytest.raises(ShapeError):
        TrainSolve(np.eye(3), np.ones(4), 0.1)
    with pytest.raises(ValueError):
        TrainSolve(np.eye(3), np.ones(3), 0.0)
    with pytest.raises(FactorizationError):
        TrainSolve(-np.eye(3), np.ones(3), 0.1)


def test_gp_variance_non_negative():
    t = toy(n=6, T=4, seed=3)
    _, var = gp_posterior(t["Ktr"], t["Ks"], t["Kss"], t["y"], t["sigma2"])
    assert np.all(var >= -1e-8)


# --- corrections against the nested-loop oracle ---------------------------


@pytest.mark.parametrize("n", [2, 3, 4])
def test_dense_path_matches_naive_loops(n):
    t = toy(n=n, T=2, seed=n)
    solve = TrainSolve(t["Ktr"], t["y"], t["sigma2"])
    S = slices(t["U"], n)
    Ut = u_tilde_star(S, solve, t["Ks"])
    Utt = u_tilde_star_star(S, solve, t["Ks"], Ut)
    f = fwc_mean(Ut, solve)
    mean, _ = gp_posterior(t["Ktr"], t["Ks"], t["Kss"], t["y"], t["sigma2"], solve)
    f2, sig = fwc_variance(Utt, solve, mean, f)
    ref_f, ref_f2 = naive_fwc(t["U"], n, t["Ktr"], t["Ks"], t["y"], t["sigma2"])
    assert np.allclose(f, ref_f, rtol=1e-10, atol=1e-12)
    assert np.allclose(f2, ref_f2, rtol=1e-10, atol=1e-12)
    assert np.allclose(sig, ref_f2 - 2 * mean * ref_f, rtol=1e-10, atol=1e-12)
    assert np.allclose(Utt, Utt.transpose(0, 2, 1), atol=1e-13)


@pytest.mark.parametrize("mode", ["factorized", "materialized", "streaming"])
def test_backends_match_naive_loops(mode):
    t = toy(n=5, T=3, seed=7)
    Xtr, Xte = t["X"][:5], t["X"][5:]
    spec = NetworkSpec(1, "quadratic", readout_var=t["readout_var"])
    op = build_cumulant_operator(Xtr, Xte, spec, mode=mode)
    solve = TrainSolve(t["Ktr"], t["y"], t["sigma2"])
    mean, _ = gp_posterior(t["Ktr"], t["Ks"], t["Kss"], t["y"], t["sigma2"], solve)
    f, f2, _ = fwc_from_operator(op, solve, t["Ks"], mean)
    ref_f, ref_f2 = naive_fwc(t["U"], 5, t["Ktr"], t["Ks"], t["y"], t["sigma2"])
    assert np.allclose(f, ref_f, rtol=1e-10, atol=1e-12)
    assert np.allclose(f2, ref_f2, rtol=1e-10, atol=1e-12)


def test_streaming_and_materialized_agree_for_relu():
    rng = np.random.default_rng(8)
    X = sphere(rng, 14, 30)
    y = rng.standard_normal(10)
    spec = NetworkSpec(1, "relu")
    L = linear_kernel(X).values
    K = relu_kernel(L).values
    out = []
    for mode in ("materialized", "streaming"):
        op = build_cumulant_operator(X[:10], X[10:], spec, mode=mode, fallback="quadrature")
        post = finite_width_posterior(K[:10, :10], K[10:, :10], np.diag(K)[10:], y, 0.1, op)
        out.append(np.concatenate([post.fwc_mean, post.fwc_var]))
    assert np.allclose(out[0], out[1], rtol=1e-10, atol=1e-14)


def test_entry_cumulant_n2_exhaustive():
    t = toy(n=2, T=1, seed=9)
    op = EntryCumulant(QuadraticProvider(), t["L"], t["readout_var"], 2)
    packed = op.train_tensor().values
    quads = sorted_tuples(2, 4)
    assert len(packed) == 5
    for q, v in zip(quads, packed):
        L4 = t["L"][np.ix_(q, q)]
        direct = t["readout_var"] ** 2 * sum(quadratic_V(L4[np.ix_(p, p)])
                                              for p in [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)])
        assert v == pytest.approx(direct, rel=1e-13)
    U, Us, Uss = op.dense_slices()
    ref = slices(t["U"], 2)
    for a, b in zip((U, Us, Uss), ref):
        assert np.allclose(a, b, rtol=1e-12)


def test_materialization_cap():
    rng = np.random.default_rng(10)
    L = linear_kernel(sphere(rng, 12, 3)).values
    with pytest.raises(MemoryError, match="streaming"):
        EntryCumulant(QuadraticProvider(), L, 1.0, 10, cap=8)


def test_orthogonal_inputs_slices():
    # z^2 has a non-zero mean, so repeated indices survive even when L = identity
    d = 6
    X = np.sqrt(d) * np.eye(d)[:5]
    L = linear_kernel(X).values
    op = EntryCumulant(QuadraticProvider(), L, 1.0, 4)
    got = op.dense_slices()
    for a, b in zip(got, slices(dense_U_quadratic(L, 1.0), 4)):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    assert got[0][0, 1, 2, 3] == 0.0 and got[1][0, 0, 1, 2] == 0.0
    assert got[0][0, 0, 0, 0] == pytest.approx(288.0)
    assert got[0][0, 0, 0, 1] == pytest.approx(36.0)


# --- structural properties --------------------------------------------------


def _fwc(t, y=None, scale=1.0, perm=None):
    n = t["n"]
    y = t["y"] if y is None else y
    Ktr, Ks, U = t["Ktr"], t["Ks"], scale * t["U"]
    if perm is not None:
        full = np.concatenate([perm, np.arange(n, U.shape[0])])
        U = U[np.ix_(full, full, full, full)]
        Ktr, Ks, y = Ktr[np.ix_(perm, perm)], Ks[:, perm], y[perm]
    solve = TrainSolve(Ktr, y, t["sigma2"])
    S = slices(U, n)
    Ut = u_tilde_star(S, solve, Ks)
    mean, _ = gp_posterior(Ktr, Ks, t["Kss"], y, t["sigma2"], solve)
    f = fwc_mean(Ut, solve)
    f2, sig = fwc_variance(u_tilde_star_star(S, solve, Ks, Ut), solve, mean, f)
    return f, f2, sig


def test_zero_cumulant_or_targets():
    t = toy(n=4, T=2, seed=11)
    f, f2, sig = _fwc(t, scale=0.0)
    assert np.all(f == 0) and np.all(sig == 0)
    f, f2, sig = _fwc(t, y=np.zeros(4))
    assert np.all(f == 0)
    solve = TrainSolve(t["Ktr"], np.zeros(4), t["sigma2"])
    S = slices(t["U"], 4)
    Utt = u_tilde_star_star(S, solve, t["Ks"])
    assert np.allclose(sig, -0.5 * np.einsum("tab,ab->t", Utt, solve.matrix()), rtol=1e-12)


def test_fwc_linear_in_U():
    t = toy(n=4, T=2, seed=12)
    a = np.concatenate(_fwc(t))
    b = np.concatenate(_fwc(t, scale=2.7))
    assert np.allclose(b, 2.7 * a, rtol=1e-12)


def test_fwc_mean_is_cubic_plus_linear_in_y():
    t = toy(n=4, T=3, seed=13)
    f1 = _fwc(t, y=t["y"])[0]
    f2 = _fwc(t, y=2 * t["y"])[0]
    # f(c) = c^3 A + c B
    A = (f2 - 2 * f1) / 6.0
    B = f1 - A
    f3 = _fwc(t, y=3 * t["y"])[0]
    assert np.allclose(f3, 27 * A + 3 * B, rtol=1e-8)
    assert np.all(np.abs(A) > 1e-6) and np.all(np.abs(B) > 1e-6)


def test_relabeling_training_points():
    t = toy(n=5, T=2, seed=14)
    perm = np.random.default_rng(0).permutation(5)
    a = np.concatenate(_fwc(t))
    b = np.concatenate(_fwc(t, perm=perm))
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)


def test_duplicated_test_point_interpolates_U():
    t = toy(n=4, T=1, seed=15)
    # append a copy of train point 2 as the test point
    Xd = np.vstack([t["X"][:4], t["X"][2:3]])
    L = linear_kernel(Xd).values
    U = dense_U_quadratic(L, t["readout_var"])
    K = quadratic_kernel(L, t["readout_var"]).values
    solve = TrainSolve(K[:4, :4], t["y"], 1e-10)
    Ut = u_tilde_star(slices(U, 4), solve, K[4:, :4])
    assert np.max(np.abs(Ut)) < 1e-6 * np.max(np.abs(U))


# --- posterior container ----------------------------------------------------


def test_combine_limits():
    rng = np.random.default_rng(16)
    g, v, f, f2, s = (rng.standard_normal(4) for _ in range(5))
    v = np.abs(v) + 10
    post = combine(g, v, f, f2, s, N=1)
    assert np.allclose(post.combined_mean, g + f)
    post.set_width(1e9)
    assert np.all(np.abs(post.combined_mean - g) < 1e-6 * np.abs(f) + 1e-15)
    assert np.array_equal(post.set_width(np.inf).combined_mean, g)
    diffs = [combine(g, v, f, f2, s, N=N).combined_mean - g for N in (2, 4, 8, 16)]
    for k in range(3):
        assert np.allclose(diffs[k], 2 * diffs[k + 1], rtol=1e-13)
    with pytest.raises(ValueError):
        post.set_width(0.5)


def test_negative_variance_is_flagged_not_clamped():
    with pytest.warns(RuntimeWarning):
        post = combine([0.0], [0.1], [0.0], [0.0], [-5.0], N=10)
    assert post.combined_var[0] == pytest.approx(-0.4)
    assert post.negative_var[0]


def test_expected_test_loss():
    tg = np.array([1.0, -1.0, 2.0])
    assert expected_test_loss((tg, np.zeros(3)), tg) == 0.0
    assert expected_test_loss((np.zeros(3), np.zeros(3)), np.ones(3)) == 1.0
    rng = np.random.default_rng(17)
    m, v = rng.standard_normal(3), rng.random(3)
    assert expected_test_loss((m, v), tg) == pytest.approx(np.mean((m - tg) ** 2 + v))
    with pytest.raises(ShapeError):
        expected_test_loss((m, v), np.ones(2))


def test_posterior_csv(tmp_path):
    post = combine([1.0, 2.0], [0.1, 0.2], [0.5, -0.5], [0.0, 0.0], [0.01, 0.02], N=4)
    post.to_csv(tmp_path / "p.csv", targets=[1.5, 2.5])
    raw = (tmp_path / "p.csv").read_bytes()
    assert raw.startswith(b"id,gp_mean,gp_var,fwc_mean,fwc_var,combined_mean,combined_var,target\r\n")
    row = raw.split(b"\r\n")[1].split(b",")
    assert float(row[5]) == pytest.approx(1.125)


def test_multi_output_channels():
    t = toy(n=4, T=2, seed=18)
    spec = NetworkSpec(1, "quadratic", readout_var=t["readout_var"])
    op = build_cumulant_operator(t["X"][:4], t["X"][4:], spec)
    Y = np.column_stack([t["y"], -2 * t["y"]])
    post = finite_width_posterior(t["Ktr"], t["Ks"], t["Kss"], Y, t["sigma2"], op, N=10)
    single = finite_width_posterior(t["Ktr"], t["Ks"], t["Kss"], Y[:, 1], t["sigma2"], op, N=10)
    assert post.fwc_mean.shape == (2, 2)
    assert np.allclose(post.fwc_mean[:, 1], single.fwc_mean, rtol=1e-13)
