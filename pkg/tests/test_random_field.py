"""Matern kernel, KL eigendecomposition and field evaluation."""

import math

import numpy as np
import pytest

from mlmcmc_beam.random_field import (
    GaussianFieldRealisation,
    KLBasis,
    MaternParams,
    basis_cache_key,
    build_kl_basis,
    cached_kl_basis,
    eigenvalue_decay_slope,
    eval_field,
    gauss_legendre_grid,
    load_kl_basis,
    matern_cov,
    matern_cov_pairwise,
    sample_coefficients,
    save_kl_basis,
)

# Reference kernel values computed with 40-digit arithmetic from the
# closed forms K_{1/2}(z) = sqrt(pi/(2z)) e^-z and
# K_{3/2}(z) = sqrt(pi/(2z)) e^-z (1 + 1/z).
EXP_MINUS_ONE = 0.3678794411714423215955
MATERN_15_REF = 2.885321695006001687295  # variance 4, length 0.5, nu 1.5, r 0.3


class TestKernel:
    def test_diagonal_is_exact_variance(self):
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=1.5)
        x = np.array([0.3, 0.7])
        assert matern_cov(x, x, p) == 4.0
        assert matern_cov(x, x.copy(), p) == 4.0

    def test_exponential_special_case(self):
        # nu = 1/2 reduces to s2 * exp(-r / corr_length).
        p = MaternParams(variance=1.0, corr_length=0.5, smoothness=0.5)
        v = matern_cov(np.array([0.0, 0.0]), np.array([0.5, 0.0]), p)
        assert v == pytest.approx(EXP_MINUS_ONE, rel=1e-12)

    def test_nu_three_halves_reference(self):
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=1.5)
        v = matern_cov(np.array([0.1, 0.2]), np.array([0.4, 0.2]), p)
        assert v == pytest.approx(MATERN_15_REF, rel=1e-12)

    def test_symmetry_exact(self, rng):
        p = MaternParams(variance=2.0, corr_length=0.3, smoothness=2.0)
        for _ in range(100):
            x, y = rng.uniform(0, 1, size=(2, 2))
            assert matern_cov(x, y, p) == matern_cov(y, x, p)

    def test_pairwise_matches_scalar(self, rng):
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=1.5)
        a = rng.uniform(0, 1, size=(4, 2))
        b = rng.uniform(0, 1, size=(3, 2))
        C = matern_cov_pairwise(a, b, p)
        assert C.shape == (4, 3)
        for i in range(4):
            for j in range(3):
                # the two routes sum the squared distance in different
                # orders, so agreement is to rounding, not bitwise
                assert C[i, j] == pytest.approx(matern_cov(a[i], b[j], p), rel=1e-13)

    def test_decay_and_positivity(self):
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=3.0)
        r = np.linspace(0.0, 3.0, 50)
        origin = np.zeros(2)
        vals = np.array([matern_cov(origin, np.array([ri, 0.0]), p) for ri in r])
        assert np.all(vals > 0)
        assert np.all(np.diff(vals) < 0)

    def test_param_validation(self):
        with pytest.raises(ValueError):
            MaternParams(variance=0.0, corr_length=0.5, smoothness=1.5)
        with pytest.raises(ValueError):
            MaternParams(variance=1.0, corr_length=-0.5, smoothness=1.5)
        with pytest.raises(ValueError):
            MaternParams(variance=1.0, corr_length=0.5, smoothness=0.0)


class TestQuadrature:
    def test_grid_integrates_polynomials(self):
        nodes, weights = gauss_legendre_grid(8)
        assert nodes.shape == (64, 2)
        assert weights.sum() == pytest.approx(1.0, rel=1e-14)
        # exact for polynomial degree up to 15 per axis
        f = nodes[:, 0] ** 5 * nodes[:, 1] ** 3
        assert weights @ f == pytest.approx(1.0 / 6 / 4, rel=1e-13)


class TestKLBasis:
    def test_eigenvalues_sorted_positive(self, small_basis):
        lam = small_basis.eigenvalues
        assert lam.shape == (40,)
        assert np.all(lam > 0)
        assert np.all(np.diff(lam) <= 0)

    def test_orthonormal_under_quadrature(self, small_basis):
        F = small_basis.eigenfunctions
        w = small_basis.quad_weights
        G = F.T @ (w[:, None] * F)
        assert np.allclose(np.diag(G), 1.0, atol=1e-8)
        off = G - np.diag(np.diag(G))
        assert np.max(np.abs(off)) < 1e-6

    def test_variance_deficit_positive_decreasing(self, small_basis):
        deficits = [small_basis.truncated_variance_deficit(m) for m in range(1, 41)]
        assert all(d > 0 for d in deficits)
        assert all(a > b for a, b in zip(deficits, deficits[1:]))
        assert small_basis.truncated_variance_deficit() == deficits[-1]

    def test_quadrature_refinement_stability(self):
        # Leading eigenvalues should be converged already at 20 points/dim.
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=1.5)
        lam_c = build_kl_basis(p, n_quad=20, truncation=10).eigenvalues
        lam_f = build_kl_basis(p, n_quad=40, truncation=10).eigenvalues
        assert np.max(np.abs(lam_c - lam_f) / lam_f) < 0.01

    def test_mercer_reconstruction(self):
        # With truncation = n_quad^2 the Nystrom eigenpairs reconstruct the
        # kernel matrix exactly (up to eigensolver rounding).
        p = MaternParams(variance=4.0, corr_length=0.5, smoothness=3.0)
        basis = build_kl_basis(p, n_quad=12, truncation=144)
        F, lam = basis.eigenfunctions, basis.eigenvalues
        C_rebuilt = (F * lam) @ F.T
        C = matern_cov_pairwise(basis.quad_nodes, basis.quad_nodes, p)
        assert np.max(np.abs(C_rebuilt - C)) < 1e-10 * p.variance

    def test_extension_reproduces_nodal_values(self, small_basis):
        B = small_basis.extension_matrix(small_basis.quad_nodes)
        F = small_basis.eigenfunctions
        assert np.allclose(B, F, rtol=1e-8, atol=1e-8 * np.max(np.abs(F)))

    def test_extension_single_point_shape(self, small_basis):
        B = small_basis.extension_matrix(np.array([0.5, 0.5]))
        assert B.shape == (1, 40)

    def test_build_validation(self):
        p_rough = MaternParams(variance=1.0, corr_length=0.5, smoothness=0.5)
        with pytest.raises(ValueError, match="smoothness"):
            build_kl_basis(p_rough, n_quad=8, truncation=4)
        p = MaternParams(variance=1.0, corr_length=0.5, smoothness=1.5)
        with pytest.raises(ValueError, match="truncation"):
            build_kl_basis(p, n_quad=4, truncation=17)
        with pytest.raises(ValueError, match="truncation"):
            build_kl_basis(p, n_quad=4, truncation=0)

    def test_decay_slope_steeper_for_smoother_kernel(self):
        lam_15 = build_kl_basis(
            MaternParams(4.0, 0.5, 1.5), n_quad=20, truncation=60).eigenvalues
        lam_30 = build_kl_basis(
            MaternParams(4.0, 0.5, 3.0), n_quad=20, truncation=60).eigenvalues
        s_15 = eigenvalue_decay_slope(lam_15, 10, 50)
        s_30 = eigenvalue_decay_slope(lam_30, 10, 50)
        assert s_30 < s_15 < -1.0

    def test_decay_slope_validation(self, small_basis):
        lam = small_basis.eigenvalues
        with pytest.raises(ValueError):
            eigenvalue_decay_slope(lam, 0, 10)
        with pytest.raises(ValueError):
            eigenvalue_decay_slope(lam, 10, 10)
        with pytest.raises(ValueError):
            eigenvalue_decay_slope(lam, 10, 41)
        with pytest.raises(ValueError):
            eigenvalue_decay_slope(np.array([1.0, 0.5, -0.1, 0.01]), 1, 4)

    def test_decay_slope_exact_power_law(self):
        m = np.arange(1, 101, dtype=float)
        assert eigenvalue_decay_slope(3.0 * m ** -2.5, 5, 80) == pytest.approx(-2.5, rel=1e-12)


class TestFieldEvaluation:
    def test_zero_coefficients_give_mean(self, small_basis):
        real = GaussianFieldRealisation(small_basis, np.zeros(40))
        pts = np.array([[0.1, 0.2], [0.9, 0.9]])
        assert np.all(eval_field(real, pts) == 0.0)

    def test_single_mode(self, small_basis):
        k = 3
        xi = np.zeros(10)
        xi[k] = 1.0
        real = GaussianFieldRealisation(small_basis, xi)
        vals = eval_field(real, small_basis.quad_nodes)
        expected = math.sqrt(small_basis.eigenvalues[k]) * small_basis.eigenfunctions[:, k]
        assert np.allclose(vals, expected, rtol=1e-8, atol=1e-10)

    def test_doubling_coefficients_is_exact(self, small_basis, rng):
        xi = rng.standard_normal(25)
        pts = rng.uniform(0, 1, size=(30, 2))
        v1 = eval_field(GaussianFieldRealisation(small_basis, xi), pts)
        v2 = eval_field(GaussianFieldRealisation(small_basis, 2.0 * xi), pts)
        assert np.array_equal(v2, 2.0 * v1)

    def test_too_many_coefficients_rejected(self, small_basis):
        with pytest.raises(ValueError, match="coefficients"):
            GaussianFieldRealisation(small_basis, np.zeros(41))

    def test_sample_covariance_matches_truncated_kernel(self, small_basis, rng):
        # The truncated field has covariance sum_m lambda_m b_m(x) b_m(y);
        # check a Monte Carlo estimate against that matrix directly.
        pts = np.array([[0.2, 0.3], [0.5, 0.5], [0.8, 0.2], [0.3, 0.8], [0.6, 0.7]])
        B = small_basis.extension_matrix(pts)
        A = B * np.sqrt(small_basis.eigenvalues)
        C_trunc = A @ A.T

        n = 20000
        xi = rng.standard_normal((n, 40))
        fields = xi @ A.T
        C_mc = np.cov(fields, rowvar=False)
        se = np.sqrt((np.outer(np.diag(C_trunc), np.diag(C_trunc))
                      + C_trunc ** 2) / n)
        assert np.all(np.abs(C_mc - C_trunc) < 4 * se)

    def test_truncated_covariance_near_kernel(self, small_basis):
        # With 40 modes the truncated covariance reproduces the kernel up
        # to the Mercer remainder, which the retained-mass deficit bounds
        # on average.
        pts = small_basis.quad_nodes
        w = small_basis.quad_weights
        F, lam = small_basis.eigenfunctions, small_basis.eigenvalues
        diag_trunc = np.sum(F ** 2 * lam, axis=1)
        mean_gap = float(w @ (small_basis.params.variance - diag_trunc))
        assert mean_gap == pytest.approx(small_basis.truncated_variance_deficit(), rel=1e-6)
        assert 0 < mean_gap < 0.15 * small_basis.params.variance

    def test_sample_coefficients(self, small_basis):
        rng = np.random.default_rng(3)
        xi = sample_coefficients(small_basis, rng)
        assert xi.shape == (40,)
        xi_small = sample_coefficients(small_basis, np.random.default_rng(3), m=7)
        assert np.array_equal(xi_small, xi[:7])


class TestCache:
    def test_round_trip_bit_exact(self, small_basis, tmp_path):
        path = tmp_path / "basis.npz"
        save_kl_basis(small_basis, path)
        loaded = load_kl_basis(path)
        assert loaded.params == small_basis.params
        assert loaded.n_quad == small_basis.n_quad
        assert loaded.truncation == small_basis.truncation
        assert np.array_equal(loaded.eigenvalues, small_basis.eigenvalues)
        assert np.array_equal(loaded.eigenfunctions, small_basis.eigenfunctions)
        assert np.array_equal(loaded.quad_nodes, small_basis.quad_nodes)
        assert np.array_equal(loaded.quad_weights, small_basis.quad_weights)

    def test_cached_build_reuses_file(self, tmp_path):
        p = MaternParams(variance=1.0, corr_length=0.5, smoothness=1.5)
        b1 = cached_kl_basis(p, n_quad=10, truncation=5, cache_dir=tmp_path)
        files = list(tmp_path.glob("klbasis_*.npz"))
        assert len(files) == 1
        b2 = cached_kl_basis(p, n_quad=10, truncation=5, cache_dir=tmp_path)
        assert np.array_equal(b1.eigenvalues, b2.eigenvalues)
        assert np.array_equal(b1.eigenfunctions, b2.eigenfunctions)
        assert list(tmp_path.glob("klbasis_*.npz")) == files

    def test_cache_key_distinguishes_params(self):
        p1 = MaternParams(1.0, 0.5, 1.5)
        p2 = MaternParams(1.0, 0.5, 3.0)
        assert basis_cache_key(p1, 10, 5) != basis_cache_key(p2, 10, 5)
        assert basis_cache_key(p1, 10, 5) != basis_cache_key(p1, 12, 5)
        assert basis_cache_key(p1, 10, 5) != basis_cache_key(p1, 10, 6)

    def test_cache_none_dir_builds(self):
        p = MaternParams(1.0, 0.5, 1.5)
        b = cached_kl_basis(p, n_quad=8, truncation=4, cache_dir=None)
        assert isinstance(b, KLBasis)
