"""Intrinsic-noise estimation for the per-point sample means.

Each design point carries replicated observations whose scatter estimates the
intrinsic variance there.  The model consumes the variance *of the sample
mean*, i.e. the per-point variance divided by the replicate count, collected
into a diagonal matrix aligned with the task's design rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import FidelitySpec, Measurement, TaskDataset
from .errors import ConfigurationError, InsufficientReplicatesError

POLICIES = ("sample_variance_only", "declared_variance_fallback")


@dataclass(frozen=True)
class NoiseMatrix:
    """Diagonal covariance of a task's sample-mean vector."""

    variances: np.ndarray  # (n_l,) per-point intrinsic variance
    counts: np.ndarray  # (n_l,) replicate counts

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        c = np.asarray(self.counts, dtype=int).reshape(-1)
        if v.shape != c.shape:
            raise ConfigurationError("variances and counts must align")
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "counts", c)

    @property
    def diag(self) -> np.ndarray:
        return self.variances / self.counts

    def matrix(self) -> np.ndarray:
        return np.diag(self.diag)


def sample_variance(m: Measurement) -> float:
    """Unbiased variance of one point's replicates (needs at least two)."""
    if m.n_replicates < 2:
        raise InsufficientReplicatesError(
            f"point {m.location} has {m.n_replicates} replicate(s); at least "
            f"two are needed to estimate a variance"
        )
    return float(np.var(m.replicates, ddof=1))


def build_noise_matrix(
    task: TaskDataset,
    fidelities: Mapping[str, FidelitySpec] | Sequence[FidelitySpec],
    policy: str = "declared_variance_fallback",
) -> NoiseMatrix:
    """Per-point noise for one task under the chosen estimation policy.

    ``sample_variance_only`` demands >= 2 replicates everywhere and ignores
    declared gauge variances.  ``declared_variance_fallback`` substitutes a
    gauge's declared variance whenever the gauge was characterized up front
    (``declared_variance_known``) or a point has a single replicate.
    """
    if policy not in POLICIES:
        raise ConfigurationError(
            f"unknown noise policy {policy!r}; choose one of {POLICIES}"
        )
    if not isinstance(fidelities, Mapping):
        fidelities = {f.id: f for f in fidelities}

    variances = np.empty(task.n_points)
    counts = np.empty(task.n_points, dtype=int)
    for i, m in enumerate(task.measurements):
        counts[i] = m.n_replicates
        if m.fidelity_id not in fidelities:
            raise ConfigurationError(
                f"task {task.task_id}: measurement at {m.location} references "
                f"unknown fidelity {m.fidelity_id!r}"
            )
        spec = fidelities[m.fidelity_id]
        if policy == "sample_variance_only":
            variances[i] = sample_variance(m)
        elif spec.declared_variance_known or m.n_replicates < 2:
            variances[i] = spec.variance
        else:
            variances[i] = sample_variance(m)
    return NoiseMatrix(variances=variances, counts=counts)
