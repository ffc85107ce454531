import math
from itertools import permutations

import numpy as np
import pytest

from nnsp._validation import NonConvergentError, ShapeError
from nnsp.cumulants import (FourthCumulant, QuadraticProvider, QuadratureProvider, ReluSeriesProvider,
                            SeriesTruncation, U_entries, assemble_U, deep_U_recursion, g_table,
                            mc_fourth_cumulant, mc_moment4, n_sorted, packed_rank, quadratic_V, relu_g,
                            relu_g_integral, relu_mu4_series, sorted_tuples, symmetry_spot_check)
from nnsp.kernels import NetworkSpec, deep_kernel_recursion, linear_kernel

from oracles import quadratic_U_isserlis, quadratic_connected_isserlis, random_psd


def test_quadratic_V_examples():
    assert quadratic_V(np.eye(4)) == 0.0
    assert quadratic_V(np.ones((4, 4))) == pytest.approx(96.0, abs=1e-12)
    L = np.eye(4)
    L[0, 2] = L[2, 0] = 0.5
    assert quadratic_V(L) == pytest.approx(0.5, abs=1e-14)
    assert quadratic_connected_isserlis(L) == pytest.approx(0.5, abs=1e-14)
    with pytest.raises(ShapeError):
        quadratic_V(np.eye(3))


def test_quadratic_V_matches_isserlis_on_random_blocks():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        L = random_psd(rng, 4)
        for p in [(0, 1, 2, 3), (0, 2, 1, 3), (0, 3, 1, 2)]:
            ref = quadratic_connected_isserlis(L, p)
            got = quadratic_V(L[np.ix_(p, p)])
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-300))
    assert worst < 1e-10


def test_quadratic_V_batched_shape():
    rng = np.random.default_rng(11)
    blocks = np.stack([random_psd(rng, 4) for _ in range(6)]).reshape(2, 3, 4, 4)
    out = quadratic_V(blocks)
    assert out.shape == (2, 3)
    assert out[1, 2] == pytest.approx(quadratic_V(blocks[1, 2]))


def test_g_table_spot_values():
    g = g_table(5)
    assert g[0] == pytest.approx(1 / math.sqrt(2 * math.pi))
    assert g[1] == pytest.approx(-0.5j)
    assert g[3] == 0 and g[5] == 0


@pytest.mark.parametrize("s", range(0, 11))
def test_g_matches_defining_integral(s):
    assert abs(relu_g(s) - relu_g_integral(s)) < 1e-10


def test_printed_g_variant():
    # the printed closed form differs from the integral by (-1)^(k+1) for s = 2k+2
    for k in range(4):
        s = 2 * k + 2
        expect = (-1) ** k * math.factorial(2 * k) / (math.sqrt(2 * math.pi) * 2 ** k * math.factorial(k))
        assert relu_g(s, printed=True) == pytest.approx(expect)
        assert relu_g(s) == pytest.approx((-1) ** (k + 1) * relu_g(s, printed=True))


def test_relu_series_independent_case():
    assert relu_mu4_series(np.eye(4)) == pytest.approx(1 / (4 * math.pi ** 2), abs=1e-15)


def test_relu_series_matches_monte_carlo():
    rng = np.random.default_rng(12)
    trunc = SeriesTruncation(t_max=6)
    for trial in range(2):
        L = random_psd(rng, 4, offdiag=0.2)
        mean, se = mc_moment4(L, "relu", samples=10 ** 7, seed=100 + trial)
        assert abs(relu_mu4_series(L, trunc) - mean) < 4 * se


def test_relu_series_truncation_stability():
    rng = np.random.default_rng(13)
    for _ in range(10):
        L = random_psd(rng, 4, offdiag=0.3)
        a = relu_mu4_series(L, SeriesTruncation(8))
        b = relu_mu4_series(L, SeriesTruncation(10))
        _, se = mc_moment4(L, "relu", samples=10 ** 5, seed=1)
        assert abs(a - b) < se


def test_relu_series_non_convergent():
    L = np.eye(4)
    L[1, 3] = L[3, 1] = 0.7
    with pytest.raises(NonConvergentError) as info:
        relu_mu4_series(L)
    assert info.value.pair == (1, 3)
    with pytest.raises(ValueError):
        SeriesTruncation(offdiag_threshold=1.0)


def test_relu_series_matches_quadrature():
    rng = np.random.default_rng(14)
    L = np.stack([random_psd(rng, 4, offdiag=0.25) for _ in range(5)])
    series = ReluSeriesProvider().connected(L)
    quad = QuadratureProvider("relu", quad_order=24).connected(L)
    assert np.max(np.abs(series - quad)) < 2e-5


def test_assemble_U_examples():
    prov = QuadraticProvider()
    assert assemble_U(prov, np.eye(4), 1.0, [0, 1, 2, 3]) == 0.0
    assert assemble_U(prov, np.ones((1, 1)), 1.0, [0, 0, 0, 0]) == pytest.approx(288.0)
    L = random_psd(np.random.default_rng(15), 5)
    a = assemble_U(prov, L, 1.0, [0, 1, 3, 4])
    assert assemble_U(prov, L, 2.0, [0, 1, 3, 4]) == pytest.approx(4 * a, rel=1e-14)
    with pytest.raises(ShapeError):
        assemble_U(prov, L, 1.0, [0, 1, 2])


def test_quadratic_U_matches_isserlis_with_repeats():
    rng = np.random.default_rng(16)
    L = random_psd(rng, 4)
    for q in [(0, 0, 1, 2), (1, 1, 1, 3), (2, 2, 3, 3), (0, 1, 2, 3)]:
        got = assemble_U(QuadraticProvider(), L, 0.7, q)
        ref = quadratic_U_isserlis(L, 0.7, list(q))
        assert got == pytest.approx(ref, rel=1e-10)


def test_mc_fourth_cumulant_quadratic():
    d = 6
    # orthogonal inputs on the sphere give L = identity
    X = math.sqrt(d) * np.eye(d)[:4]
    est, se = mc_fourth_cumulant(NetworkSpec(1, "quadratic"), X, samples=10 ** 6, seed=1)
    assert abs(est) < 4 * se
    Xc = np.repeat(X[:1], 4, axis=0)
    spec = NetworkSpec(1, "quadratic", readout_var=0.5)
    est, se = mc_fourth_cumulant(spec, Xc, samples=10 ** 6, seed=2)
    assert abs(est - 288 * 0.25) < 4 * se
    with pytest.raises(ValueError):
        mc_fourth_cumulant(spec, Xc, samples=1000)


def test_mc_fourth_cumulant_relu_matches_series():
    rng = np.random.default_rng(17)
    d = 24
    X = rng.standard_normal((4, d))
    X = math.sqrt(d) * X / np.linalg.norm(X, axis=1, keepdims=True)
    spec = NetworkSpec(1, "relu")
    est, se = mc_fourth_cumulant(spec, X, samples=2 * 10 ** 6, seed=3)
    L = linear_kernel(X).values
    ref = assemble_U(ReluSeriesProvider(), L, 1.0, [0, 1, 2, 3])
    assert abs(est - ref) < 4 * se


def test_packed_storage_roundtrip():
    n = 5
    t = sorted_tuples(n, 4)
    assert len(t) == n_sorted(n, 4) == 70
    assert np.array_equal(packed_rank(t), np.arange(len(t)))
    assert packed_rank([3, 1, 0, 1]) == packed_rank([0, 1, 1, 3])


def test_fourth_cumulant_symmetry_and_scaling():
    rng = np.random.default_rng(18)
    X = rng.standard_normal((6, 5))
    L = linear_kernel(X).values
    U = FourthCumulant.from_provider(QuadraticProvider(), L, 1.0)
    D = U.dense()
    for p in permutations(range(4)):
        assert np.array_equal(D, D.transpose(p))
    U2 = FourthCumulant.from_provider(QuadraticProvider(), L, 2.0)
    assert np.allclose(U2.values, 4 * U.values, rtol=1e-14, atol=0)
    assert symmetry_spot_check(U, 6) == 0.0
    assert U(1, 2, 3, 4) == D[4, 3, 2, 1]


def test_symmetry_spot_check_on_streamed_entries():
    rng = np.random.default_rng(19)
    L = random_psd(rng, 7)

    def entry(a, b, c, d):
        return float(U_entries(QuadraticProvider(), L, 1.0, np.array([[a, b, c, d]]))[0])

    assert symmetry_spot_check(entry, 7, n_checks=50) < 1e-12


def test_deep_U_linear_activation_is_isserlis():
    # readout products of Gaussian units are not Gaussian: V_(12)(34) = L13 L24 + L14 L23
    rng = np.random.default_rng(20)
    X = rng.standard_normal((4, 5))
    for depth in (1, 2):
        spec = NetworkSpec(depth, "linear", readout_var=0.6)
        U = deep_U_recursion(spec, X)
        K = deep_kernel_recursion(spec, X)[-2].values
        ref = 0.36 * 2 * (K[0, 1] * K[2, 3] + K[0, 2] * K[1, 3] + K[0, 3] * K[1, 2])
        assert U(0, 1, 2, 3) == pytest.approx(ref, rel=1e-10)


def test_deep_U_quadratic_matches_closed_form():
    rng = np.random.default_rng(21)
    X = rng.standard_normal((4, 6))
    X = math.sqrt(6) * X / np.linalg.norm(X, axis=1, keepdims=True)
    spec = NetworkSpec(2, "quadratic", weight_var=[1.0, 0.4], readout_var=0.5)
    deep = deep_U_recursion(spec, X, quad_order=32)
    K = deep_kernel_recursion(spec, X)[-2].values
    ref = FourthCumulant.from_provider(QuadraticProvider(), K, 0.5)
    assert np.max(np.abs(deep.values - ref.values)) <= 1e-5 * np.max(np.abs(ref.values))


def test_deep_U_relu_matches_series():
    rng = np.random.default_rng(22)
    d = 30
    X = rng.standard_normal((4, d))
    X = math.sqrt(d) * X / np.linalg.norm(X, axis=1, keepdims=True)
    spec = NetworkSpec(1, "relu")
    deep = deep_U_recursion(spec, X, quad_order=24)
    L = linear_kernel(X).values
    got = deep(0, 1, 2, 3)
    ref = assemble_U(ReluSeriesProvider(), L, 1.0, [0, 1, 2, 3])
    assert abs(got - ref) < 1e-4 * abs(ref) + 1e-6
