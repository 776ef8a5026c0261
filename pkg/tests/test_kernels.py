"""Tests for kernel evaluation, SPD regularization, and the composite
covariance blend."""

import math

import numpy as np
import pytest

from mtsk import ConfigurationError, KernelDegeneracyError
from mtsk.kernels import (
    KernelConfig,
    chol_spd,
    composite_covariance,
    eval_kernel,
    gram,
    regularize_spd,
    spd_logdet,
)
from scipy.linalg import cho_solve


class TestEvalKernel:
    def test_hand_values_at_length_scale(self):
        # at separation sqrt(delta_sq) the kernel is exactly 1/e; at twice
        # that separation it is e^-4
        cfg = KernelConfig(delta_sq=80.0)
        s = math.sqrt(80.0)
        k = eval_kernel(cfg, [[0.0]], [[s]])
        np.testing.assert_allclose(k[0, 0], math.exp(-1.0), rtol=1e-15)
        k2 = eval_kernel(cfg, [[0.0]], [[2.0 * s]])
        np.testing.assert_allclose(k2[0, 0], math.exp(-4.0), rtol=1e-15)

    def test_unit_at_zero_separation(self):
        cfg = KernelConfig(delta_sq=2.0)
        np.testing.assert_allclose(eval_kernel(cfg, [[3.0, 4.0]], [[3.0, 4.0]]), 1.0)

    def test_multidimensional_uses_euclidean_norm(self):
        cfg = KernelConfig(delta_sq=5.0)
        k = eval_kernel(cfg, [[0.0, 0.0]], [[3.0, 4.0]])
        np.testing.assert_allclose(k[0, 0], math.exp(-25.0 / 5.0), rtol=1e-14)

    def test_empty_inputs(self):
        cfg = KernelConfig()
        assert eval_kernel(cfg, np.zeros((0, 1)), np.zeros((4, 1))).shape == (0, 4)
        assert gram(cfg, np.zeros((0, 2))).shape == (0, 0)

    def test_dimension_mismatch_rejected(self):
        cfg = KernelConfig()
        with pytest.raises(ConfigurationError):
            eval_kernel(cfg, np.zeros((2, 1)), np.zeros((2, 2)))

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            KernelConfig(delta_sq=-1.0)
        with pytest.raises(ConfigurationError):
            KernelConfig(kind="matern")


class TestGram:
    def test_symmetric_unit_diagonal_psd(self):
        rng = np.random.default_rng(11)
        cfg = KernelConfig(delta_sq=3.0)
        x = rng.uniform(0, 10, size=(12, 2))
        k = gram(cfg, x)
        np.testing.assert_array_equal(k, k.T)
        np.testing.assert_allclose(np.diag(k), 1.0)
        assert np.linalg.eigvalsh(k).min() > -1e-10


class TestRegularizeSpd:
    def test_pd_matrix_unchanged(self):
        m = np.array([[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_array_equal(regularize_spd(m), m)

    def test_singular_matrix_gets_shifted(self):
        m = np.ones((3, 3))  # rank one
        out = regularize_spd(m, jitter=1e-10)
        assert out[0, 0] > 1.0
        np.linalg.cholesky(out)

    def test_negative_definite_raises(self):
        with pytest.raises(KernelDegeneracyError):
            regularize_spd(-np.eye(2), jitter=1e-10)

    def test_asymmetric_raises(self):
        with pytest.raises(KernelDegeneracyError):
            regularize_spd(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_chol_solves_linear_system(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 6))
        m = a @ a.T + 6 * np.eye(6)
        rhs = rng.standard_normal(6)
        x = cho_solve(chol_spd(m), rhs)
        np.testing.assert_allclose(m @ x, rhs, atol=1e-10)

    def test_logdet_matches_slogdet(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((5, 5))
        m = a @ a.T + 5 * np.eye(5)
        sign, ld = np.linalg.slogdet(m)
        assert sign == 1.0
        np.testing.assert_allclose(spd_logdet(m), ld, rtol=1e-12)


class TestCompositeCovariance:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.cfg = KernelConfig(delta_sq=4.0)
        self.x = np.sort(rng.uniform(0, 10, size=(8, 1)), axis=0)
        self.k = gram(self.cfg, self.x)

    def test_prior_weight_recovers_base_kernel_on_design(self):
        # with the weight covariance at its prior value (inverse Gram), the
        # blend collapses to the base kernel at the design points
        k_reg = regularize_spd(self.k, jitter=1e-12)
        k_inv = np.linalg.inv(k_reg)
        out = composite_covariance(self.cfg, self.x, k_inv, 3, 1.0, self.x)
        np.testing.assert_allclose(out, self.k, atol=1e-8)

    def test_large_nu_limit_is_base_kernel(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((8, 8))
        c = a @ a.T
        q = rng.uniform(0, 10, size=(5, 1))
        out = composite_covariance(self.cfg, self.x, c, 3, 1e12, q)
        np.testing.assert_allclose(out, eval_kernel(self.cfg, q, q), atol=1e-9)

    def test_doubled_weight_covariance_hand_value(self):
        # m = nu = 1 and C = 2 * K^-1 makes the design-point blend
        # (2K + K) / 2 = 1.5 K
        k_reg = regularize_spd(self.k, jitter=1e-12)
        c = 2.0 * np.linalg.inv(k_reg)
        out = composite_covariance(self.cfg, self.x, c, 1, 1.0, self.x)
        np.testing.assert_allclose(out, 1.5 * self.k, atol=1e-7)

    def test_blend_weights_match_manual_formula(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            m = int(rng.integers(1, 6))
            nu = float(10.0 ** rng.uniform(-2, 2))
            a = rng.standard_normal((8, 8))
            c = a @ a.T
            qa = rng.uniform(0, 10, size=(4, 1))
            qb = rng.uniform(0, 10, size=(3, 1))
            out = composite_covariance(self.cfg, self.x, c, m, nu, qa, qb)
            ka = eval_kernel(self.cfg, self.x, qa)
            kb = eval_kernel(self.cfg, self.x, qb)
            manual = (m * ka.T @ c @ kb + nu * eval_kernel(self.cfg, qa, qb)) / (
                m + nu
            )
            np.testing.assert_allclose(out, manual, rtol=1e-12)

    def test_symmetric_output_for_single_point_set(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((8, 8))
        c = a @ a.T
        q = rng.uniform(0, 10, size=(6, 1))
        out = composite_covariance(self.cfg, self.x, c, 2, 0.5, q)
        np.testing.assert_array_equal(out, out.T)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ConfigurationError):
            composite_covariance(self.cfg, self.x, self.k, 0, 1.0, self.x)
        with pytest.raises(ConfigurationError):
            composite_covariance(self.cfg, self.x, self.k, 2, 0.0, self.x)
