"""Seeded benchmark generators.

Two reproducible data sources for exercising the model and baselines: a 1D
three-task study with two gauges of known precision and replicated readings,
and a 2D machined-surface study in which several similar surfaces are probed
by a high and a low resolution gauge and a process-rate covariate (material
removal rate, MRR) supplies the second trend regressor.

Both generators are pure functions of their config: the same seed yields
bitwise-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.linalg import cho_solve

from .basis import CallableRegressorBasis, LinearBasis
from .data import FidelitySpec, Measurement, TaskDataset
from .errors import ConfigurationError
from .kernels import KernelConfig, chol_lower, eval_kernel, gram

LOW_RES = "low_res"
HIGH_RES = "high_res"

# 1D per-task trend and wave coefficients (a, b, c)
_COEFFS_1D = ((0.1, 0.1, 0.2), (5.0, -0.2, 0.4), (0.3, 0.3, 0.3))

# 2D per-task plane coefficients relative to the mean height scale
_PLANES_2D = ((0.90, 0.08, 0.04), (1.05, -0.05, 0.09), (1.00, 0.03, -0.06))

_DOMAIN_2D_LO = 0.0
_DOMAIN_2D_HI = 20.0
_MAX_LATTICE_SIDE = 41


class Bench1DTruth:
    """One task's true response: linear trend plus two fixed sinusoids.

    Evaluates ``a + b x + sin(pi x / 5) + c sin(4 pi x / 5)`` elementwise.
    """

    def __init__(self, a: float, b: float, c: float):
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (
            self.a
            + self.b * x
            + np.sin(np.pi * x / 5.0)
            + self.c * np.sin(4.0 * np.pi * x / 5.0)
        )

    def trend(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.a + self.b * x


@dataclass(frozen=True)
class Bench1DConfig:
    """Configuration for the 1D three-task study.

    Each task takes ``n_points_per_task`` measurements at uniform random
    locations with ``replicates`` repeated readings per location.  Every
    location is assigned to either the low precision gauge (``sigma_low``)
    or the high precision gauge (``sigma_high``): a balanced random split
    by default, or strict alternation with ``gauge_assignment="alternate"``.
    """

    n_points_per_task: int = 10
    replicates: int = 3
    sigma_low: float = 0.2
    sigma_high: float = 0.05
    domain_lo: float = 0.0
    domain_hi: float = 20.0
    seed: int = 0
    gauge_assignment: str = "random"

    def __post_init__(self):
        if self.n_points_per_task < 1:
            raise ConfigurationError("n_points_per_task must be >= 1")
        if self.replicates < 1:
            raise ConfigurationError("replicates must be >= 1")
        if self.sigma_low < 0 or self.sigma_high < 0:
            raise ConfigurationError("gauge sigmas must be >= 0")
        if not self.domain_lo < self.domain_hi:
            raise ConfigurationError("domain_lo must be < domain_hi")
        if self.gauge_assignment not in ("random", "alternate"):
            raise ConfigurationError(
                "gauge_assignment must be 'random' or 'alternate'"
            )


@dataclass(frozen=True)
class Bench1D:
    """Generated 1D study: datasets, truth functions, and gauge specs."""

    tasks: tuple[TaskDataset, ...]
    truths: tuple[Bench1DTruth, ...]
    fidelities: Mapping[str, FidelitySpec]


def gen_1d_tasks(cfg: Bench1DConfig) -> Bench1D:
    """Generate the three 1D tasks with replicated two-gauge measurements.

    The tasks share the two sinusoidal terms; their trends and the weight of
    the faster wave differ.  Replicate noise is independent Normal with the
    assigned gauge's standard deviation.
    """
    rng = np.random.default_rng(cfg.seed)
    fidelities = {
        LOW_RES: FidelitySpec(id=LOW_RES, sigma=cfg.sigma_low),
        HIGH_RES: FidelitySpec(id=HIGH_RES, sigma=cfg.sigma_high),
    }
    n = cfg.n_points_per_task
    tasks = []
    truths = []
    for task_id, (a, b, c) in enumerate(_COEFFS_1D, start=1):
        truth = Bench1DTruth(a, b, c)
        x = rng.uniform(cfg.domain_lo, cfg.domain_hi, n)
        if cfg.gauge_assignment == "alternate":
            labels = [HIGH_RES if i % 2 == 0 else LOW_RES for i in range(n)]
        else:
            # balanced split, order randomized per seed
            labels = [HIGH_RES] * (n // 2) + [LOW_RES] * (n - n // 2)
            labels = [labels[i] for i in rng.permutation(n)]
        measurements = []
        for i in range(n):
            sigma = fidelities[labels[i]].sigma
            reps = truth(x[i]) + rng.normal(0.0, sigma, cfg.replicates)
            measurements.append(
                Measurement(
                    location=np.array([x[i]]),
                    replicates=reps,
                    fidelity_id=labels[i],
                )
            )
        tasks.append(
            TaskDataset(
                task_id=task_id,
                measurements=tuple(measurements),
                basis=LinearBasis(),
                domain_lo=np.array([cfg.domain_lo]),
                domain_hi=np.array([cfg.domain_hi]),
            )
        )
        truths.append(truth)
    return Bench1D(tasks=tuple(tasks), truths=tuple(truths), fidelities=fidelities)


class _LatticeField:
    """Smooth random field: kernel sections anchored at a fixed lattice.

    ``field(x) = kappa(x, centers) @ weights`` with weights drawn so the
    field restricted to the lattice has exactly the kernel's covariance.
    The lattice spacing sits well below the kernel length scale, so the
    field behaves like a full sample path at a fraction of the cost.
    """

    def __init__(self, kernel_cfg: KernelConfig, centers: np.ndarray, weights: np.ndarray):
        self.kernel_cfg = kernel_cfg
        self.centers = centers
        self.weights = weights

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return eval_kernel(self.kernel_cfg, x, self.centers) @ self.weights


class SurfaceTruth:
    """One surface's true height: a plane plus a smooth residual field."""

    def __init__(self, intercept: float, slopes: np.ndarray, residual_field: _LatticeField):
        self.intercept = float(intercept)
        self.slopes = np.asarray(slopes, dtype=float)
        self.residual_field = residual_field

    def trend(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.intercept + x @ self.slopes

    def residual(self, x: np.ndarray) -> np.ndarray:
        return self.residual_field(x)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.trend(x) + self.residual(x)


class CorrelatedCovariate:
    """Covariate built to correlate with a truth surface at a fixed level.

    Combines the standardized surface with an independent smooth field that
    was orthogonalized against it on the reference grid, so the empirical
    correlation on that grid equals ``rho`` exactly.  All standardization
    constants are frozen at construction; the object is a pure function.
    """

    def __init__(
        self,
        truth: SurfaceTruth,
        smooth: _LatticeField,
        rho: float,
        z_mean: float,
        z_std: float,
        s_mean: float,
        s_slope: float,
        s_std: float,
    ):
        self.truth = truth
        self.smooth = smooth
        self.rho = float(rho)
        self.z_mean = float(z_mean)
        self.z_std = float(z_std)
        self.s_mean = float(s_mean)
        self.s_slope = float(s_slope)
        self.s_std = float(s_std)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        z_hat = (self.truth(x) - self.z_mean) / self.z_std
        s_perp = (self.smooth(x) - self.s_mean - self.s_slope * z_hat) / self.s_std
        return self.rho * z_hat + np.sqrt(1.0 - self.rho**2) * s_perp


@dataclass(frozen=True)
class EngineBenchConfig:
    """Configuration for the 2D machined-surface study.

    Each of ``n_tasks`` surfaces is probed at ``n_high`` locations with the
    high resolution gauge and ``n_low`` with the low resolution gauge, one
    reading per location.  ``gauge_pair`` gives the two repeatabilities
    ``(p_high, p_low)`` as a percentage of the mean surface height: the
    gauge noise standard deviation is ``(p / 100) * mean_height_scale``.
    ``mrr_correlation`` fixes the empirical correlation between each
    surface and its rate covariate on the evaluation grid.  ``similarity``
    scales the per-surface perturbation of the shared residual field,
    ``residual_amplitude`` its overall size as a fraction of mean height,
    and ``field_delta_sq`` the squared-exponential scale of its waviness.
    """

    n_tasks: int = 3
    n_low: int = 25
    n_high: int = 25
    n_test: int = 15000
    gauge_pair: tuple[float, float] = (0.1, 0.5)
    mrr_correlation: float = 0.7
    mean_height_scale: float = 20.0
    seed: int = 0
    similarity: float = 0.1
    residual_amplitude: float = 0.0625
    field_delta_sq: float = 16.0

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ConfigurationError("n_tasks must be >= 1")
        if self.n_low < 0 or self.n_high < 0 or self.n_low + self.n_high < 1:
            raise ConfigurationError("need at least one measured point per task")
        if self.n_test < 2:
            raise ConfigurationError("n_test must be >= 2")
        p_high, p_low = self.gauge_pair
        if p_high <= 0 or p_low <= 0:
            raise ConfigurationError("gauge_pair percentages must be > 0")
        if not -1.0 <= self.mrr_correlation <= 1.0:
            raise ConfigurationError("mrr_correlation must lie in [-1, 1]")
        if self.mean_height_scale <= 0:
            raise ConfigurationError("mean_height_scale must be > 0")
        if self.similarity < 0:
            raise ConfigurationError("similarity must be >= 0")
        if self.residual_amplitude < 0:
            raise ConfigurationError("residual_amplitude must be >= 0")
        if self.field_delta_sq <= 0:
            raise ConfigurationError("field_delta_sq must be > 0")


@dataclass(frozen=True)
class EngineBench:
    """Generated surface study: datasets, truths, covariates, and grids."""

    tasks: tuple[TaskDataset, ...]
    truths: tuple[SurfaceTruth, ...]
    mrr_fields: tuple[CorrelatedCovariate, ...]
    fidelities: Mapping[str, FidelitySpec]
    test_points: np.ndarray  # (n_test, 2)
    test_truth: np.ndarray  # (n_tasks, n_test)


def gauge_pairs_table() -> list[tuple[float, float]]:
    """The nine (p_high, p_low) repeatability pairs of the gauge sweep."""
    return [
        (0.1, 0.5),
        (0.1, 2.5),
        (0.1, 5.0),
        (0.1, 12.5),
        (0.5, 2.5),
        (0.5, 5.0),
        (0.5, 12.5),
        (2.5, 5.0),
        (2.5, 12.5),
    ]


def _lattice_centers(delta_sq: float) -> np.ndarray:
    # spacing at half the kernel length scale keeps the anchored field
    # indistinguishable from a full sample path; cap the lattice for cost
    width = _DOMAIN_2D_HI - _DOMAIN_2D_LO
    spacing = 0.5 * np.sqrt(delta_sq / 2.0)
    side = int(min(_MAX_LATTICE_SIDE, max(8, np.ceil(width / spacing) + 1)))
    g = np.linspace(_DOMAIN_2D_LO, _DOMAIN_2D_HI, side)
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def _draw_field_weights(chol: np.ndarray, z: np.ndarray) -> np.ndarray:
    # weights w with K_cc w = L z, so the lattice values L z have covariance K_cc
    return cho_solve((chol, True), chol @ z)


def gen_engine_tasks(cfg: EngineBenchConfig) -> EngineBench:
    """Generate similar 2D surfaces probed by two gauges with an MRR basis.

    All surfaces share one smooth residual field up to a small per-surface
    perturbation; their planar trends differ.  Each surface's MRR covariate
    correlates with its height at exactly ``cfg.mrr_correlation`` on the
    evaluation grid, and every task's basis is ``[1, MRR(x)]``.
    """
    rng = np.random.default_rng(cfg.seed)
    scale = cfg.mean_height_scale
    kernel_cfg = KernelConfig(delta_sq=cfg.field_delta_sq)
    centers = _lattice_centers(cfg.field_delta_sq)
    k_cc = gram(kernel_cfg, centers)
    chol = chol_lower(k_cc)

    n_c = centers.shape[0]
    z_shared = rng.normal(size=n_c)
    w_shared = _draw_field_weights(chol, z_shared)

    truths = []
    width = _DOMAIN_2D_HI - _DOMAIN_2D_LO
    for task_idx in range(cfg.n_tasks):
        w_pert = _draw_field_weights(chol, rng.normal(size=n_c))
        if task_idx < len(_PLANES_2D):
            a, b, c = _PLANES_2D[task_idx]
        else:
            a = 1.0 + rng.uniform(-0.1, 0.1)
            b, c = rng.uniform(-0.08, 0.08, 2)
        weights = cfg.residual_amplitude * scale * (w_shared + cfg.similarity * w_pert)
        truths.append(
            SurfaceTruth(
                intercept=a * scale,
                slopes=np.array([b, c]) * scale / width,
                residual_field=_LatticeField(kernel_cfg, centers, weights),
            )
        )

    # one smoother for every task: covariate similarity across tasks mirrors
    # surface similarity, as it would when the covariate comes from the
    # shared process itself
    smooth = _LatticeField(
        kernel_cfg, centers, _draw_field_weights(chol, rng.normal(size=n_c))
    )

    test_points = rng.uniform(_DOMAIN_2D_LO, _DOMAIN_2D_HI, (cfg.n_test, 2))
    test_truth = np.stack([t(test_points) for t in truths])

    mrr_fields = []
    for task_idx in range(cfg.n_tasks):
        z = test_truth[task_idx]
        z_mean, z_std = float(z.mean()), float(z.std())
        if not z_std > 0:
            raise ConfigurationError(
                "degenerate truth surface: constant on the evaluation grid"
            )
        z_hat = (z - z_mean) / z_std
        s = smooth(test_points)
        s_mean = float(s.mean())
        s_slope = float(np.dot(s - s_mean, z_hat) / np.dot(z_hat, z_hat))
        s_perp = s - s_mean - s_slope * z_hat
        s_std = float(s_perp.std())
        if not s_std > 0:
            raise ConfigurationError(
                "degenerate covariate field: no variation independent of the surface"
            )
        mrr_fields.append(
            CorrelatedCovariate(
                truth=truths[task_idx],
                smooth=smooth,
                rho=cfg.mrr_correlation,
                z_mean=z_mean,
                z_std=z_std,
                s_mean=s_mean,
                s_slope=s_slope,
                s_std=s_std,
            )
        )

    p_high, p_low = cfg.gauge_pair
    fidelities = {
        HIGH_RES: FidelitySpec(
            id=HIGH_RES, sigma=(p_high / 100.0) * scale, declared_variance_known=True
        ),
        LOW_RES: FidelitySpec(
            id=LOW_RES, sigma=(p_low / 100.0) * scale, declared_variance_known=True
        ),
    }

    tasks = []
    lo = np.array([_DOMAIN_2D_LO, _DOMAIN_2D_LO])
    hi = np.array([_DOMAIN_2D_HI, _DOMAIN_2D_HI])
    for task_idx in range(cfg.n_tasks):
        n_pts = cfg.n_high + cfg.n_low
        x = rng.uniform(_DOMAIN_2D_LO, _DOMAIN_2D_HI, (n_pts, 2))
        labels = [HIGH_RES] * cfg.n_high + [LOW_RES] * cfg.n_low
        heights = truths[task_idx](x)
        measurements = []
        for i in range(n_pts):
            sigma = fidelities[labels[i]].sigma
            obs = heights[i] + rng.normal(0.0, sigma)
            measurements.append(
                Measurement(
                    location=x[i], replicates=np.array([obs]), fidelity_id=labels[i]
                )
            )
        tasks.append(
            TaskDataset(
                task_id=task_idx + 1,
                measurements=tuple(measurements),
                basis=CallableRegressorBasis(mrr_fields[task_idx]),
                domain_lo=lo,
                domain_hi=hi,
            )
        )

    return EngineBench(
        tasks=tuple(tasks),
        truths=tuple(truths),
        mrr_fields=tuple(mrr_fields),
        fidelities=fidelities,
        test_points=test_points,
        test_truth=test_truth,
    )
