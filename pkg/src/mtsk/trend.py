"""Per-task global trends and the outer trend/residual alternation.

Each task carries a small linear model U_l(x)' beta_l for systematic
variation.  Fitting alternates between regressing detrended sample means on
the basis and re-estimating the shared residual field on the new residuals,
until the trend coefficients stop moving or a small iteration cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.linalg import qr

from .data import HyperParams, ModelState, PooledDesign, TaskDataset, TaskState, sample_means
from .em import EMConfig, EMState, EMTrace, run_em
from .errors import ConfigurationError, DimensionMismatchError, RankDeficientBasisError
from .kernels import KernelConfig, chol_lower, gram
from .noise import NoiseMatrix

REGRESSIONS = ("ols", "huber_irls")

# Phi^-1(3/4): scales the median absolute residual to a Gaussian sigma
_MAD_TO_SIGMA = 0.6744897501960817


@dataclass(frozen=True)
class TrendConfig:
    """Trend-fit family and outer-loop controls.

    ``t3`` bounds every task's relative coefficient change, ``t4`` the mean
    across tasks; either one stops the alternation.
    """

    regression: str = "ols"
    huber_c: float = 1.345
    t3: float = 1e-4
    t4: float = 1e-4
    k2_max: int = 5
    irls_tol: float = 1e-10
    irls_max_iter: int = 100

    def __post_init__(self):
        if self.regression not in REGRESSIONS:
            raise ConfigurationError(
                f"unknown regression {self.regression!r}; choose one of {REGRESSIONS}"
            )
        if self.huber_c <= 0:
            raise ConfigurationError("huber_c must be > 0")
        if self.t3 <= 0 or self.t4 <= 0:
            raise ConfigurationError("trend thresholds must be > 0")
        if self.k2_max < 1:
            raise ConfigurationError("k2_max must be >= 1")


@dataclass
class OuterTrace:
    """Per-outer-iteration record of trend movement and inner EM traces."""

    iterations: list[tuple[int, float, float]] = field(default_factory=list)
    em_traces: list[EMTrace] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    def to_table(self) -> str:
        lines = ["iteration\tmax_beta_delta\tmean_beta_delta"]
        for j, dmax, dmean in self.iterations:
            lines.append(f"{j}\t{dmax:.17g}\t{dmean:.17g}")
        return "\n".join(lines) + "\n"


def _check_full_rank(u: np.ndarray, rank: int) -> None:
    if rank == u.shape[1]:
        return
    # pivoted QR points at the columns that depend on earlier ones
    _, r, piv = qr(u, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max(initial=0.0) * max(u.shape) * np.finfo(float).eps
    dependent = sorted(int(p) for p in piv[diag <= tol]) or sorted(
        int(p) for p in piv[rank:]
    )
    raise RankDeficientBasisError(
        f"basis matrix has rank {rank} < {u.shape[1]} columns; "
        f"dependent column indices: {dependent}"
    )


def _ols(u: np.ndarray, y: np.ndarray) -> np.ndarray:
    beta, _, rank, _ = np.linalg.lstsq(u, y, rcond=None)
    _check_full_rank(u, rank)
    return beta


def _huber_irls(u: np.ndarray, y: np.ndarray, cfg: TrendConfig) -> np.ndarray:
    beta = _ols(u, y)
    y_scale = float(np.median(np.abs(y))) + 1.0
    for _ in range(cfg.irls_max_iter):
        r = y - u @ beta
        s = float(np.median(np.abs(r))) / _MAD_TO_SIGMA
        if s <= 1e-12 * y_scale:
            # most points fit exactly; nothing left to reweight
            break
        cut = cfg.huber_c * s
        absr = np.abs(r)
        w = np.where(absr <= cut, 1.0, cut / np.maximum(absr, 1e-300))
        sw = np.sqrt(w)
        beta_new, _, rank, _ = np.linalg.lstsq(u * sw[:, None], y * sw, rcond=None)
        _check_full_rank(u, rank)
        if np.linalg.norm(beta_new - beta) <= cfg.irls_tol * (
            np.linalg.norm(beta) + 1.0
        ):
            beta = beta_new
            break
        beta = beta_new
    return beta


def fit_trend(u: np.ndarray, y: np.ndarray, cfg: TrendConfig) -> np.ndarray:
    """Trend coefficients for one task's (detrended-target, basis) pair."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if u.shape[0] != y.size:
        raise DimensionMismatchError(
            f"basis has {u.shape[0]} rows for {y.size} targets"
        )
    if u.shape[0] < u.shape[1]:
        raise ConfigurationError(
            f"need at least {u.shape[1]} points to fit {u.shape[1]} coefficients"
        )
    if cfg.regression == "ols":
        return _ols(u, y)
    return _huber_irls(u, y, cfg)


NoiseUpdate = Callable[
    [Mapping[int, np.ndarray], "EMState | None"], Mapping[int, np.ndarray]
]


def iterate_model(
    tasks: Sequence[TaskDataset],
    pooled: PooledDesign,
    kernel_cfg: KernelConfig,
    hyper: HyperParams,
    noises: Mapping[int, NoiseMatrix | np.ndarray],
    em_cfg: EMConfig | None = None,
    trend_cfg: TrendConfig | None = None,
    noise_update: NoiseUpdate | None = None,
    warm_start: bool = True,
) -> tuple[ModelState, OuterTrace]:
    """Alternate trend fits and shared-field EM until the trends settle.

    Iteration j fits each task's trend to the sample means minus the previous
    field estimate, then re-runs EM on the new residuals.  The stop check
    refits the trend against the updated field (that refit is exactly the
    next iteration's trend, so nothing is wasted) and compares; convergence
    at iteration j therefore means iteration j+1 would not move.

    ``noise_update``, when given, replaces the per-task noise before each EM
    pass; it receives the current residuals and the previous EM state (None
    on the first pass).  ``warm_start`` carries the shared moments across
    outer iterations.
    """
    if trend_cfg is None:
        trend_cfg = TrendConfig(t3=hyper.t3, t4=hyper.t4, k2_max=hyper.k2_max)
    if em_cfg is None:
        em_cfg = EMConfig(t1=hyper.t1, t2=hyper.t2, k1_max=hyper.k1_max)
    if not tasks:
        raise ConfigurationError("iterate_model needs at least one task")
    task_by_id = {t.task_id: t for t in tasks}
    task_ids = sorted(task_by_id.keys())
    if len(task_by_id) != len(tasks):
        raise ConfigurationError("task ids must be unique")

    zbar = {tid: sample_means(task_by_id[tid]) for tid in task_ids}
    u = {tid: task_by_id[tid].basis_values() for tid in task_ids}
    for tid in task_ids:
        if u[tid].shape[0] != pooled.rows_for(tid).size:
            raise DimensionMismatchError(
                f"task {tid}: dataset rows do not match the pooled index map"
            )

    kappa = gram(kernel_cfg, pooled.points)
    chol = chol_lower(kappa, hyper.jitter)
    cache = (kappa, chol)

    eta_hat = {tid: np.zeros(zbar[tid].size) for tid in task_ids}
    trace = OuterTrace()
    em_state: EMState | None = None
    beta: dict[int, np.ndarray] = {}
    residuals: dict[int, np.ndarray] = {}
    cur_noises: Mapping[int, NoiseMatrix | np.ndarray] = noises

    for j in range(1, trend_cfg.k2_max + 1):
        beta = {
            tid: fit_trend(u[tid], zbar[tid] - eta_hat[tid], trend_cfg)
            for tid in task_ids
        }
        residuals = {tid: zbar[tid] - u[tid] @ beta[tid] for tid in task_ids}
        if noise_update is not None:
            cur_noises = noise_update(residuals, em_state)
        init = em_state if (warm_start and em_state is not None) else None
        em_state, em_trace = run_em(
            residuals,
            cur_noises,
            pooled,
            kernel_cfg,
            hyper,
            em_cfg,
            init=init,
            gram_cache=cache,
        )
        trace.em_traces.append(em_trace)
        for tid in task_ids:
            rows = pooled.rows_for(tid)
            eta_hat[tid] = kappa[rows, :] @ em_state.alpha_hat[tid]
        # lookahead: where would the next trend fit land?
        beta_next = {
            tid: fit_trend(u[tid], zbar[tid] - eta_hat[tid], trend_cfg)
            for tid in task_ids
        }
        rel = [
            float(
                np.linalg.norm(beta_next[tid] - beta[tid])
                / (np.linalg.norm(beta[tid]) + 1.0)
            )
            for tid in task_ids
        ]
        trace.iterations.append((j, max(rel), float(np.mean(rel))))
        if all(r < trend_cfg.t3 for r in rel):
            trace.converged = True
            trace.stop_reason = "per_task_beta_delta below t3"
            break
        if float(np.mean(rel)) < trend_cfg.t4:
            trace.converged = True
            trace.stop_reason = "mean_beta_delta below t4"
            break
    else:
        trace.stop_reason = "reached k2_max"

    task_states = {}
    for tid in task_ids:
        task = task_by_id[tid]
        nm = cur_noises[tid]
        diag = nm.diag if isinstance(nm, NoiseMatrix) else np.asarray(nm, dtype=float)
        task_states[tid] = TaskState(
            alpha_hat=em_state.alpha_hat[tid],
            c_alpha_l=em_state.c_alpha_l[tid],
            beta_hat=beta[tid],
            noise_diag=diag.reshape(-1),
            locations=task.locations,
            basis_values=u[tid],
            eta=residuals[tid],
            domain_lo=task.domain_lo,
            domain_hi=task.domain_hi,
        )
    state = ModelState(
        pooled=pooled,
        mu_alpha=em_state.mu_alpha,
        c_alpha=em_state.c_alpha,
        tasks=task_states,
    )
    return state, trace
