"""Posterior mean and variance at arbitrary query locations, per task.

The mean combines the task trend with the base-kernel-weighted shared-field
coefficients over the pooled design.  The variance has two parts: residual
uncertainty, which pools every task's design points (so any task's data
shrinks it everywhere), and trend uncertainty from the task's own regression.
Both parts evaluate the unknown field covariance through the fitted composite
blend.  Queries are treated as noiseless: the target is the underlying
surface, not a gauge reading of it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .data import BasisFn, ModelState, as_locations
from .errors import ConfigurationError, KernelDegeneracyError, UnknownTaskError
from .kernels import KernelConfig, chol_spd, composite_covariance, eval_kernel


class ExtrapolationWarning(UserWarning):
    """A query lies outside the task's declared domain box."""


_CLAMP_FLOOR = -1e-10


@dataclass(frozen=True)
class Prediction:
    """Mean and variance at query locations for one task.

    ``components``, when requested, splits the mean into trend plus residual
    field and the variance into its residual-pooling and trend parts.
    """

    task_id: int
    locations: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    components: dict[str, np.ndarray] | None = None

    def to_table(self) -> str:
        d = self.locations.shape[1]
        header = [f"x{i + 1}" for i in range(d)] + ["mean", "variance"]
        comp_keys = sorted(self.components) if self.components else []
        header += comp_keys
        lines = ["\t".join(header)]
        for i in range(self.locations.shape[0]):
            row = [f"{v:.17g}" for v in self.locations[i]]
            row += [f"{self.mean[i]:.17g}", f"{self.variance[i]:.17g}"]
            row += [f"{self.components[k][i]:.17g}" for k in comp_keys]
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def _task_state(state: ModelState, task_id: int):
    try:
        return state.tasks[task_id]
    except KeyError:
        raise UnknownTaskError(
            f"task {task_id!r} not in the fitted model (have {state.task_ids})"
        ) from None


def _check_domain(ts, x_u: np.ndarray, task_id: int) -> None:
    if ts.domain_lo is None or ts.domain_hi is None:
        return
    tol = 1e-12 * (1.0 + float(np.linalg.norm(ts.domain_hi - ts.domain_lo)))
    outside = np.any(x_u < ts.domain_lo - tol, axis=1) | np.any(
        x_u > ts.domain_hi + tol, axis=1
    )
    if np.any(outside):
        warnings.warn(
            f"task {task_id}: {int(outside.sum())} of {x_u.shape[0]} queries "
            f"lie outside the task domain; predictions there are extrapolation",
            ExtrapolationWarning,
            stacklevel=3,
        )


def predict_mean(
    state: ModelState,
    task_id: int,
    x_u,
    basis: BasisFn,
    kernel_cfg: KernelConfig,
) -> np.ndarray:
    """Trend value plus base-kernel-weighted shared-field coefficients."""
    ts = _task_state(state, task_id)
    x_u = as_locations(x_u, state.pooled.points.shape[1])
    _check_domain(ts, x_u, task_id)
    u = np.atleast_2d(np.asarray(basis(x_u), dtype=float))
    trend = u @ ts.beta_hat
    k_uq = eval_kernel(kernel_cfg, x_u, state.pooled.points)
    return trend + k_uq @ ts.alpha_hat


def predict_variance(
    state: ModelState,
    task_id: int,
    x_u,
    basis: BasisFn,
    kernel_cfg: KernelConfig,
    m: int,
    nu: float,
) -> np.ndarray:
    """Residual-pooling variance plus trend variance at the queries."""
    v1, v2 = _variance_components(state, task_id, x_u, basis, kernel_cfg, m, nu)
    return v1 + v2


def _composite(state, kernel_cfg, m, nu, a, b=None):
    return composite_covariance(
        kernel_cfg, state.pooled.points, state.c_alpha, m, nu, a, b
    )


def _variance_components(state, task_id, x_u, basis, kernel_cfg, m, nu):
    ts = _task_state(state, task_id)
    x_u = as_locations(x_u, state.pooled.points.shape[1])
    _check_domain(ts, x_u, task_id)
    task_ids = sorted(state.task_ids)

    # residual part: every task's design points, own noise on the diagonal
    stacked = np.vstack([state.tasks[t].locations for t in task_ids])
    noise = np.concatenate([state.tasks[t].noise_diag for t in task_ids])
    sigma = _composite(state, kernel_cfg, m, nu, stacked) + np.diag(noise)
    cov_xq = _composite(state, kernel_cfg, m, nu, stacked, x_u)
    solved = cho_solve(chol_spd(sigma), cov_xq)
    prior = np.diag(_composite(state, kernel_cfg, m, nu, x_u))
    v1 = prior - np.sum(cov_xq * solved, axis=0)
    bad = v1 < _CLAMP_FLOOR
    if np.any(bad):
        raise KernelDegeneracyError(
            f"residual variance went negative ({v1.min():.3e}) beyond the "
            f"clamping floor; the pooled covariance is too ill-conditioned "
            f"(near-zero noise levels make this quadratic form unstable)"
        )
    v1 = np.maximum(v1, 0.0)

    # trend part: the task's own regression uncertainty
    u_design = ts.basis_values
    u_query = np.atleast_2d(np.asarray(basis(x_u), dtype=float))
    if u_query.shape[1] != u_design.shape[1]:
        raise ConfigurationError(
            f"task {task_id}: query basis has {u_query.shape[1]} columns, "
            f"fitted model used {u_design.shape[1]}"
        )
    sigma_l = _composite(state, kernel_cfg, m, nu, ts.locations) + np.diag(
        ts.noise_diag
    )
    chol_l = chol_spd(sigma_l)
    ut_sinv = cho_solve(chol_l, u_design).T  # (p, n_l)
    b = ut_sinv @ u_design
    b = 0.5 * (b + b.T)
    cov_lq = _composite(state, kernel_cfg, m, nu, ts.locations, x_u)
    zeta = u_query.T - ut_sinv @ cov_lq  # (p, q)
    v2 = np.sum(zeta * cho_solve(chol_spd(b), zeta), axis=0)
    return v1, v2


def predict(
    state: ModelState,
    task_id: int,
    x_u,
    basis: BasisFn,
    kernel_cfg: KernelConfig,
    m: int,
    nu: float,
    with_components: bool = False,
) -> Prediction:
    """Full prediction bundle (mean, variance, optional decomposition)."""
    ts = _task_state(state, task_id)
    x_u = as_locations(x_u, state.pooled.points.shape[1])
    with warnings.catch_warnings():
        # domain checking happens once here, not in each sub-call
        warnings.simplefilter("ignore", ExtrapolationWarning)
        mean = predict_mean(state, task_id, x_u, basis, kernel_cfg)
        v1, v2 = _variance_components(
            state, task_id, x_u, basis, kernel_cfg, m, nu
        )
    _check_domain(ts, x_u, task_id)
    components = None
    if with_components:
        u = np.atleast_2d(np.asarray(basis(x_u), dtype=float))
        trend = u @ ts.beta_hat
        components = {
            "mean_trend": trend,
            "mean_residual": mean - trend,
            "var_residuals": v1,
            "var_trend": v2,
        }
    return Prediction(
        task_id=task_id,
        locations=x_u,
        mean=mean,
        variance=v1 + v2,
        components=components,
    )
