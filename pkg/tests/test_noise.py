"""Tests for per-point noise estimation and policy handling."""

import numpy as np
import pytest

from mtsk import (
    ConfigurationError,
    ConstantBasis,
    FidelitySpec,
    InsufficientReplicatesError,
    Measurement,
    TaskDataset,
)
from mtsk.noise import NoiseMatrix, build_noise_matrix, sample_variance


def task_of(measurements, task_id=1):
    return TaskDataset(
        task_id=task_id,
        measurements=measurements,
        basis=ConstantBasis(),
        domain_lo=np.array([0.0]),
        domain_hi=np.array([20.0]),
    )


LOW = FidelitySpec(id="low", sigma=0.2)
HIGH = FidelitySpec(id="high", sigma=0.05)
KNOWN = FidelitySpec(id="gauge", sigma=0.5, declared_variance_known=True)


class TestSampleVariance:
    def test_hand_value(self):
        m = Measurement(location=[0.0], replicates=[1.0, 2.0, 3.0], fidelity_id="low")
        assert sample_variance(m) == pytest.approx(1.0)

    def test_singleton_raises(self):
        m = Measurement(location=[4.0], replicates=[1.0], fidelity_id="low")
        with pytest.raises(InsufficientReplicatesError, match=r"4"):
            sample_variance(m)

    def test_unbiased_under_repeated_sampling(self):
        # with 3 replicates of sigma = 0.2 noise the estimator should average
        # to 0.04; 200k batches pin the mean well inside +-0.002
        rng = np.random.default_rng(314159)
        draws = rng.normal(0.0, 0.2, size=(200_000, 3))
        estimates = np.var(draws, axis=1, ddof=1)
        assert abs(estimates.mean() - 0.04) < 0.002


class TestNoiseMatrix:
    def test_diag_divides_by_counts(self):
        nm = NoiseMatrix(variances=np.array([0.12, 0.3]), counts=np.array([3, 5]))
        np.testing.assert_allclose(nm.diag, [0.04, 0.06])
        np.testing.assert_allclose(nm.matrix(), np.diag([0.04, 0.06]))

    def test_misaligned_shapes_rejected(self):
        with pytest.raises(ConfigurationError):
            NoiseMatrix(variances=np.array([0.1]), counts=np.array([1, 2]))


class TestBuildNoiseMatrix:
    def test_sample_variance_policy(self):
        t = task_of(
            [
                Measurement(location=[0.0], replicates=[1.0, 2.0, 3.0], fidelity_id="low"),
                Measurement(location=[5.0], replicates=[0.0, 4.0], fidelity_id="high"),
            ]
        )
        nm = build_noise_matrix(t, [LOW, HIGH], policy="sample_variance_only")
        np.testing.assert_allclose(nm.variances, [1.0, 8.0])
        np.testing.assert_allclose(nm.diag, [1.0 / 3.0, 4.0])

    def test_sample_variance_policy_rejects_singletons(self):
        t = task_of(
            [Measurement(location=[7.0], replicates=[1.0], fidelity_id="low")]
        )
        with pytest.raises(InsufficientReplicatesError, match=r"7"):
            build_noise_matrix(t, [LOW], policy="sample_variance_only")

    def test_fallback_uses_declared_variance_for_singletons(self):
        t = task_of(
            [Measurement(location=[0.0], replicates=[1.0], fidelity_id="low")]
        )
        nm = build_noise_matrix(t, [LOW], policy="declared_variance_fallback")
        np.testing.assert_allclose(nm.variances, [0.04])
        np.testing.assert_allclose(nm.diag, [0.04])

    def test_characterized_gauge_overrides_sample_variance(self):
        t = task_of(
            [
                Measurement(
                    location=[0.0], replicates=[0.0, 10.0, 20.0], fidelity_id="gauge"
                )
            ]
        )
        nm = build_noise_matrix(t, [KNOWN], policy="declared_variance_fallback")
        # declared 0.5^2 = 0.25 wins over the (huge) sample variance, and the
        # replicate count still divides through
        np.testing.assert_allclose(nm.variances, [0.25])
        np.testing.assert_allclose(nm.diag, [0.25 / 3.0])

    def test_fallback_keeps_sample_variance_for_replicated_uncharacterized(self):
        t = task_of(
            [Measurement(location=[0.0], replicates=[1.0, 3.0], fidelity_id="low")]
        )
        nm = build_noise_matrix(t, [LOW], policy="declared_variance_fallback")
        np.testing.assert_allclose(nm.variances, [2.0])

    def test_row_order_follows_measurement_order(self):
        ms = [
            Measurement(location=[0.0], replicates=[0.0, 2.0], fidelity_id="low"),
            Measurement(location=[5.0], replicates=[0.0, 4.0], fidelity_id="low"),
            Measurement(location=[9.0], replicates=[0.0, 6.0], fidelity_id="low"),
        ]
        fwd = build_noise_matrix(task_of(ms), [LOW])
        rev = build_noise_matrix(task_of(ms[::-1]), [LOW])
        np.testing.assert_allclose(fwd.diag, rev.diag[::-1])

    def test_unknown_fidelity_rejected(self):
        t = task_of(
            [Measurement(location=[0.0], replicates=[1.0, 2.0], fidelity_id="mystery")]
        )
        with pytest.raises(ConfigurationError, match="mystery"):
            build_noise_matrix(t, [LOW])

    def test_unknown_policy_rejected(self):
        t = task_of(
            [Measurement(location=[0.0], replicates=[1.0, 2.0], fidelity_id="low")]
        )
        with pytest.raises(ConfigurationError):
            build_noise_matrix(t, [LOW], policy="median")
