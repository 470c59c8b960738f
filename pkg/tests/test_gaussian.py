import numpy as np
import pytest

from flic.gaussian import (
    Gaussian,
    bures_sq,
    bures_sq_grad_cov,
    empirical_gaussian,
    grad_bures_wrt_factor,
    matrix_sqrt_psd,
    w2_sq_gaussians,
)

from helpers import fd_grad, quantile_w2_sq_1d, random_psd, rel_err


class TestMatrixSqrt:
    def test_scalar_multiple_of_identity(self):
        np.testing.assert_allclose(matrix_sqrt_psd(4 * np.eye(2)), 2 * np.eye(2))

    def test_diagonal(self):
        np.testing.assert_allclose(matrix_sqrt_psd(np.diag([1.0, 9.0])), np.diag([1.0, 3.0]))

    def test_defining_equation_on_random_psd(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(1, 9))
            M = rng.standard_normal((k, k))
            S = M.T @ M
            R = matrix_sqrt_psd(S)
            err = np.linalg.norm(R @ R - S) / np.linalg.norm(S)
            assert err < 1e-8
            np.testing.assert_allclose(R, R.T)

    def test_idempotent_under_squaring(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            R = matrix_sqrt_psd(random_psd(rng, 5))
            np.testing.assert_allclose(matrix_sqrt_psd(R @ R), R, atol=1e-9)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            matrix_sqrt_psd(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            matrix_sqrt_psd(np.array([[np.nan, 0.0], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="PSD"):
            matrix_sqrt_psd(np.diag([1.0, -0.5]))


class TestBures:
    def test_identical_arguments(self):
        assert bures_sq(np.eye(2), np.eye(2)) == pytest.approx(0.0, abs=1e-12)

    def test_commuting_identity_scalings(self):
        # tr(I) + tr(4I) - 2 tr(2I) = 2 + 8 - 8
        assert bures_sq(np.eye(2), 4 * np.eye(2)) == pytest.approx(2.0, abs=1e-10)

    def test_commuting_diagonals(self):
        got = bures_sq(np.diag([1.0, 4.0]), np.diag([9.0, 16.0]))
        assert got == pytest.approx((1 - 3) ** 2 + (2 - 4) ** 2, abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            k = int(rng.integers(1, 7))
            A, B = random_psd(rng, k), random_psd(rng, k)
            assert abs(bures_sq(A, B) - bures_sq(B, A)) < 1e-8

    def test_commuting_equals_frobenius_of_sqrt_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            k = int(rng.integers(1, 7))
            V, _ = np.linalg.qr(rng.standard_normal((k, k)))
            a = rng.uniform(0.1, 3.0, k)
            b = rng.uniform(0.1, 3.0, k)
            A = (V * a) @ V.T
            B = (V * b) @ V.T
            expected = float(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2))
            assert abs(bures_sq(A, B) - expected) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            bures_sq(np.eye(2), np.eye(3))


class TestW2:
    def test_equal_gaussians(self):
        g = Gaussian(np.zeros(2), np.eye(2))
        assert w2_sq_gaussians(g, g) == pytest.approx(0.0, abs=1e-12)

    def test_1d_closed_form(self):
        g1 = Gaussian(np.array([0.0]), np.array([[1.0]]))
        g2 = Gaussian(np.array([2.0]), np.array([[2.0]]))
        assert w2_sq_gaussians(g1, g2) == pytest.approx(5.0, abs=1e-10)

    def test_1d_against_quantile_coupling_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(8):
            m1, m2 = rng.uniform(-2, 2, 2)
            s1, s2 = rng.uniform(0.5, 2.0, 2)
            closed = w2_sq_gaussians(
                Gaussian(np.array([m1]), np.array([[s1]])),
                Gaussian(np.array([m2]), np.array([[s2]])),
            )
            brute = quantile_w2_sq_1d(m1, s1, m2, s2)
            assert abs(closed - brute) < 1e-4

    def test_triangle_inequality_on_sqrt(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            k = int(rng.integers(1, 6))
            gs = [
                Gaussian(rng.standard_normal(k), np.linalg.cholesky(random_psd(rng, k)))
                for _ in range(3)
            ]
            d01 = np.sqrt(w2_sq_gaussians(gs[0], gs[1]))
            d02 = np.sqrt(w2_sq_gaussians(gs[0], gs[2]))
            d21 = np.sqrt(w2_sq_gaussians(gs[2], gs[1]))
            assert d01 <= d02 + d21 + 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            w2_sq_gaussians(
                Gaussian(np.zeros(2), np.eye(2)), Gaussian(np.zeros(3), np.eye(3))
            )


class TestBuresFactorGradient:
    def test_zero_at_minimizer(self):
        np.testing.assert_array_equal(
            grad_bures_wrt_factor(np.eye(3), np.eye(3)), np.zeros((3, 3))
        )

    def test_identity_vs_scaled_identity_matches_fd(self):
        self._check(np.eye(2), 4 * np.eye(2))

    def test_random_instances_match_fd(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            k = int(rng.integers(1, 9))
            L = rng.standard_normal((k, k)) + 2 * np.eye(k)
            B = random_psd(rng, k)
            self._check(L, B)

    def _check(self, L, B):
        grad = grad_bures_wrt_factor(L, B)
        fd = fd_grad(
            lambda v: bures_sq(v.reshape(L.shape) @ v.reshape(L.shape).T, B),
            L.ravel(),
        ).reshape(L.shape)
        assert rel_err(grad, fd) < 1e-4

    def test_rejects_singular_factor_without_regularization(self):
        with pytest.raises(ValueError, match="singular"):
            grad_bures_wrt_factor(np.zeros((2, 2)), np.eye(2))

    def test_regularized_singular_factor_matches_fd(self):
        B = random_psd(np.random.default_rng(7), 3)
        L = np.zeros((3, 3))
        eps = 1e-2
        grad = grad_bures_wrt_factor(L, B, eps=eps)
        fd = fd_grad(
            lambda v: bures_sq(
                v.reshape(3, 3) @ v.reshape(3, 3).T + eps * np.eye(3), B
            ),
            L.ravel(),
        ).reshape(3, 3)
        assert rel_err(grad, fd) < 1e-4


class TestBuresCovGradient:
    def test_matches_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            k = int(rng.integers(1, 7))
            A = random_psd(rng, k)
            B = random_psd(rng, k)
            grad = bures_sq_grad_cov(A, B)
            # symmetric-perturbation finite differences
            fd = np.zeros_like(B)
            h = 1e-6
            for i in range(k):
                for j in range(k):
                    E = np.zeros((k, k))
                    E[i, j] += 0.5
                    E[j, i] += 0.5
                    fd[i, j] = (bures_sq(A, B + h * E) - bures_sq(A, B - h * E)) / (2 * h)
            assert rel_err(grad, fd) < 1e-4


class TestEmpiricalGaussian:
    def test_single_point(self):
        g = empirical_gaussian(np.array([[1.0, -2.0]]), eps=1e-6)
        np.testing.assert_allclose(g.mean, [1.0, -2.0])
        np.testing.assert_allclose(g.cov, 1e-6 * np.eye(2), atol=1e-18)

    def test_population_variance_two_points(self):
        g = empirical_gaussian(np.array([[-1.0], [1.0]]), eps=0.0)
        assert g.mean[0] == pytest.approx(0.0)
        assert g.cov[0, 0] == pytest.approx(1.0)

    def test_monte_carlo_recovery(self):
        rng = np.random.default_rng(9)
        k, n = 3, 10_000
        mean = rng.standard_normal(k)
        L_true = np.linalg.cholesky(random_psd(rng, k))
        cov_true = L_true @ L_true.T
        X = mean + rng.standard_normal((n, k)) @ L_true.T
        g = empirical_gaussian(X, eps=0.0)
        se_mean = np.sqrt(np.diag(cov_true) / n)
        assert np.all(np.abs(g.mean - mean) < 3 * se_mean + 1e-12)
        # covariance entries have standard error O(1/sqrt(n))
        scale = np.sqrt(np.outer(np.diag(cov_true), np.diag(cov_true)))
        assert np.all(np.abs(g.cov - cov_true) < 3 * 2 * scale / np.sqrt(n))

    def test_factor_reproduces_covariance(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((50, 4))
        g = empirical_gaussian(X, eps=1e-6)
        Xc = X - X.mean(axis=0)
        np.testing.assert_allclose(
            g.cov, Xc.T @ Xc / 50 + 1e-6 * np.eye(4), atol=1e-12
        )

    def test_rejects_empty_and_non_finite(self):
        with pytest.raises(ValueError):
            empirical_gaussian(np.zeros((0, 2)), eps=1e-6)
        with pytest.raises(ValueError):
            empirical_gaussian(np.array([[np.inf, 0.0]]), eps=1e-6)
