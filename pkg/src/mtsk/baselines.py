"""Two single-purpose comparison methods.

Per-task stochastic kriging fits each task alone by maximum likelihood, so
nothing transfers between tasks but per-point noise levels are honored.  The
homoscedastic multi-task fit shares the residual field across tasks but
collapses all noise to one learned variance, so gauge distinctions are
ignored.  Together they isolate the two axes the full model combines: task
transfer and fidelity awareness.  Both reuse the same kernel and linear
algebra as the full model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize, minimize_scalar

from .data import (
    BasisFn,
    HyperParams,
    ModelState,
    PooledDesign,
    TaskDataset,
    as_locations,
    sample_means,
)
from .em import EMConfig, EMState
from .errors import (
    ConfigurationError,
    KernelDegeneracyError,
    RankDeficientBasisError,
)
from .kernels import KernelConfig, chol_spd, composite_covariance, eval_kernel, gram
from .noise import NoiseMatrix
from .predict import _CLAMP_FLOOR, ExtrapolationWarning, Prediction
from .trend import OuterTrace, TrendConfig, iterate_model

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SKModel:
    """A single-task kriging fit: trend, length scale, noise, design."""

    task_id: int
    beta: np.ndarray
    theta: float  # squared length scale of the task's own kernel
    sigma_eps_diag: np.ndarray
    locations: np.ndarray
    z_bar: np.ndarray
    basis: BasisFn
    basis_values: np.ndarray
    kernel_kind: str
    converged: bool
    domain_lo: np.ndarray | None = None
    domain_hi: np.ndarray | None = None

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigurationError(f"theta must be > 0, got {self.theta}")
        if np.any(self.sigma_eps_diag < 0):
            raise ConfigurationError("noise diagonal must be >= 0")


def gls_beta(u: np.ndarray, z: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Generalized least squares coefficients for covariance ``sigma``."""
    c = chol_spd(sigma)
    si_u = cho_solve(c, u)
    a = u.T @ si_u
    a = 0.5 * (a + a.T)
    try:
        return np.linalg.solve(a, si_u.T @ z)
    except np.linalg.LinAlgError:
        raise RankDeficientBasisError(
            f"basis matrix with {u.shape[1]} columns is rank deficient under "
            f"the fitted covariance"
        ) from None


def _neg_log_likelihood(
    log_theta: float,
    kind: str,
    x: np.ndarray,
    u: np.ndarray,
    z: np.ndarray,
    noise_diag: np.ndarray,
    jitter: float,
) -> float:
    theta = math.exp(float(np.asarray(log_theta).reshape(-1)[0]))
    if not np.isfinite(theta) or theta <= 0:
        return np.inf
    try:
        cfg = KernelConfig(kind=kind, delta_sq=theta)
        sigma = gram(cfg, x) + np.diag(noise_diag)
        c = chol_spd(sigma, jitter)
        beta = gls_beta(u, z, sigma)
    except (KernelDegeneracyError, RankDeficientBasisError):
        return np.inf
    r = z - u @ beta
    quad = float(r @ cho_solve(c, r))
    logdet = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    return 0.5 * (z.size * _LOG_2PI + logdet + quad)


def sk_fit(
    task: TaskDataset,
    noise: NoiseMatrix | np.ndarray,
    basis: BasisFn | None = None,
    kernel_kind: str = "squared_exponential",
    restarts: int = 3,
    max_iter: int = 200,
    jitter: float = 1e-10,
) -> SKModel:
    """Maximum-likelihood kriging fit for one task.

    The trend coefficients are profiled out in closed form (generalized
    least squares) at each candidate length scale; the scale itself is found
    by simplex search over its logarithm from several starting points.  On
    constant data the likelihood is degenerate in the length scale (any
    value reproduces the data through the trend alone); the best iterate is
    still returned.  Non-convergence of the search returns the best iterate
    with ``converged=False`` and a warning.
    """
    basis_fn = basis if basis is not None else task.basis
    x = task.locations
    u = np.atleast_2d(np.asarray(basis_fn(x), dtype=float))
    z = sample_means(task)
    n, p = u.shape
    if n < p + 1:
        raise ConfigurationError(
            f"task {task.task_id}: need at least {p + 1} design points for a "
            f"{p}-column basis, got {n}"
        )
    diag = noise.diag if isinstance(noise, NoiseMatrix) else np.asarray(noise, dtype=float)
    diag = diag.reshape(-1)
    if diag.size != n:
        raise ConfigurationError(
            f"task {task.task_id}: noise diagonal has {diag.size} entries for "
            f"{n} design points"
        )

    span = float(np.linalg.norm(task.domain_hi - task.domain_lo))
    if span <= 0:
        span = 10.0
    starts = [(0.1 * span) ** 2, (0.3 * span) ** 2, span**2][:restarts]
    best = None
    any_success = False
    for theta0 in starts:
        res = minimize(
            _neg_log_likelihood,
            x0=np.array([math.log(theta0)]),
            args=(kernel_kind, x, u, z, diag, jitter),
            method="Nelder-Mead",
            options={"maxiter": max_iter, "xatol": 1e-8, "fatol": 1e-10},
        )
        if best is None or res.fun < best.fun:
            best = res
        any_success = any_success or bool(res.success)
    converged = any_success and np.isfinite(best.fun)
    if not converged:
        warnings.warn(
            f"task {task.task_id}: length-scale search did not converge; "
            f"returning the best iterate",
            UserWarning,
            stacklevel=2,
        )
    theta = math.exp(float(best.x[0]))
    cfg = KernelConfig(kind=kernel_kind, delta_sq=theta)
    sigma = gram(cfg, x) + np.diag(diag)
    beta = gls_beta(u, z, sigma)
    return SKModel(
        task_id=task.task_id,
        beta=beta,
        theta=theta,
        sigma_eps_diag=diag,
        locations=x,
        z_bar=z,
        basis=basis_fn,
        basis_values=u,
        kernel_kind=kernel_kind,
        converged=converged,
        domain_lo=task.domain_lo,
        domain_hi=task.domain_hi,
    )


def sk_predict(
    model: SKModel, x_u, with_components: bool = False, jitter: float = 1e-10
) -> Prediction:
    """Kriging mean and variance at queries, using only this task's data."""
    x_u = as_locations(x_u, model.locations.shape[1])
    if model.domain_lo is not None and model.domain_hi is not None:
        tol = 1e-12 * (
            1.0 + float(np.linalg.norm(model.domain_hi - model.domain_lo))
        )
        outside = np.any(x_u < model.domain_lo - tol, axis=1) | np.any(
            x_u > model.domain_hi + tol, axis=1
        )
        if np.any(outside):
            warnings.warn(
                f"task {model.task_id}: {int(outside.sum())} of "
                f"{x_u.shape[0]} queries lie outside the task domain",
                ExtrapolationWarning,
                stacklevel=2,
            )
    cfg = KernelConfig(kind=model.kernel_kind, delta_sq=model.theta)
    sigma = gram(cfg, model.locations) + np.diag(model.sigma_eps_diag)
    c = chol_spd(sigma, jitter)
    k_xq = eval_kernel(cfg, model.locations, x_u)
    resid = model.z_bar - model.basis_values @ model.beta
    u_query = np.atleast_2d(np.asarray(model.basis(x_u), dtype=float))
    trend = u_query @ model.beta
    mean = trend + k_xq.T @ cho_solve(c, resid)

    solved = cho_solve(c, k_xq)
    v1 = 1.0 - np.sum(k_xq * solved, axis=0)
    if np.any(v1 < _CLAMP_FLOOR):
        raise KernelDegeneracyError(
            f"kriging residual variance went negative ({v1.min():.3e}) "
            f"beyond the clamping floor"
        )
    v1 = np.maximum(v1, 0.0)
    ut_sinv = cho_solve(c, model.basis_values).T
    b = ut_sinv @ model.basis_values
    b = 0.5 * (b + b.T)
    zeta = u_query.T - ut_sinv @ k_xq
    v2 = np.sum(zeta * cho_solve(chol_spd(b, jitter), zeta), axis=0)
    components = None
    if with_components:
        components = {
            "mean_trend": trend,
            "mean_residual": mean - trend,
            "var_residuals": v1,
            "var_trend": v2,
        }
    return Prediction(
        task_id=model.task_id,
        locations=x_u,
        mean=mean,
        variance=v1 + v2,
        components=components,
    )


_SIGMA2_GRID = 20
_SIGMA2_LOWER_FACTOR = 1e-10


def estimate_shared_sigma2(
    residuals: Mapping[int, np.ndarray],
    covs: Mapping[int, np.ndarray],
    means: Mapping[int, np.ndarray],
    scale_var: float | None = None,
) -> float:
    """One noise variance for all tasks, by marginal likelihood.

    Each task's residual vector is modeled as Gaussian with the supplied
    mean and covariance plus sigma^2 I.  The search runs over a log grid
    from 1e-10 times the response variance (``scale_var``, defaulting to the
    stacked residual variance) up to ten times it, then refines the best
    interior point by golden section.  A boundary optimum is returned as
    the bound itself, so noiseless data lands exactly on the lower bound.
    """
    if scale_var is None:
        stacked = np.concatenate(
            [np.asarray(residuals[t]) for t in sorted(residuals)]
        )
        scale_var = float(np.var(stacked))
    if scale_var <= 0:
        scale_var = 1.0
    lo = _SIGMA2_LOWER_FACTOR * scale_var
    hi = 10.0 * scale_var

    eigs = {}
    for tid in sorted(residuals):
        s = np.asarray(covs[tid], dtype=float)
        s = 0.5 * (s + s.T)
        vals, vecs = np.linalg.eigh(s)
        vals = np.maximum(vals, 0.0)
        r = np.asarray(residuals[tid], dtype=float) - np.asarray(
            means[tid], dtype=float
        )
        eigs[tid] = (vals, vecs.T @ r)

    def nll(log_s2: float) -> float:
        s2 = math.exp(float(log_s2))
        total = 0.0
        for vals, proj in eigs.values():
            d = vals + s2
            total += 0.5 * (
                vals.size * _LOG_2PI
                + float(np.sum(np.log(d)))
                + float(np.sum(proj**2 / d))
            )
        return total

    grid = np.linspace(math.log(lo), math.log(hi), _SIGMA2_GRID)
    values = [nll(t) for t in grid]
    i = int(np.argmin(values))
    if i == 0:
        return lo
    if i == _SIGMA2_GRID - 1:
        return hi
    try:
        res = minimize_scalar(
            nll,
            bracket=(grid[i - 1], grid[i], grid[i + 1]),
            method="golden",
            options={"xtol": 1e-10},
        )
        best = float(res.x)
    except ValueError:
        best = float(grid[i])
    return float(np.clip(math.exp(best), lo, hi))


def homoscedastic_mtl_fit(
    tasks: Sequence[TaskDataset],
    pooled: PooledDesign,
    kernel_cfg: KernelConfig,
    hyper: HyperParams,
    em_cfg: EMConfig | None = None,
    trend_cfg: TrendConfig | None = None,
) -> tuple[ModelState, OuterTrace]:
    """Multi-task fit with a single learned noise variance.

    Runs the same trend/residual alternation as the full model, but before
    each shared-field pass the per-point noise is replaced by sigma^2 I with
    sigma^2 re-estimated from the current residuals.  The search bounds come
    from the raw response variance across all tasks.  Gauge identities never
    enter, so identical values under different gauge labels give identical
    output.
    """
    task_by_id = {t.task_id: t for t in tasks}
    stacked_means = np.concatenate(
        [sample_means(task_by_id[tid]) for tid in sorted(task_by_id)]
    )
    response_var = float(np.var(stacked_means))

    def update(
        residuals: Mapping[int, np.ndarray], em_state: EMState | None
    ) -> dict[int, np.ndarray]:
        covs = {}
        means = {}
        m = len(residuals)
        for tid in residuals:
            x_l = task_by_id[tid].locations
            if em_state is None:
                covs[tid] = gram(kernel_cfg, x_l)
                means[tid] = np.zeros(residuals[tid].size)
            else:
                covs[tid] = composite_covariance(
                    kernel_cfg,
                    pooled.points,
                    em_state.c_alpha,
                    m,
                    hyper.nu,
                    x_l,
                )
                means[tid] = (
                    eval_kernel(kernel_cfg, x_l, pooled.points)
                    @ em_state.mu_alpha
                )
        s2 = estimate_shared_sigma2(residuals, covs, means, response_var)
        return {tid: np.full(residuals[tid].size, s2) for tid in residuals}

    placeholder = {t.task_id: np.full(t.n_points, 1.0) for t in tasks}
    return iterate_model(
        tasks,
        pooled,
        kernel_cfg,
        hyper,
        placeholder,
        em_cfg=em_cfg,
        trend_cfg=trend_cfg,
        noise_update=update,
    )
