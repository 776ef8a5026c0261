"""EM estimation of the shared residual field across tasks.

Each task's detrended sample means are modeled as a kernel-weighted linear
combination of weights drawn from a shared Gaussian whose mean and covariance
carry the cross-task structure.  The E-step computes each task's posterior
weight moments; the M-step re-estimates the shared moments under a
normal-inverse-Wishart penalty with the inverse Gram matrix as scale.

The recorded objective is the EM lower bound (free energy): the expected
complete-data log-likelihood under the E-step posterior, plus that
posterior's entropy, plus the prior log-kernel

    ln p(mu, C) = -(nu/2) ln|C| - (nu/2) tr(K^-1 C^-1) - (lam/2) mu' C^-1 mu

up to additive constants.  The prior kernel is exactly the penalty whose
stationary conditions reproduce the closed-form M-step.  The entropy term is
constant during each M-step (it depends only on the E-step covariances), so
including it changes no update and no optimality comparison; it makes the
recorded sequence the bound that EM provably never decreases, which the bare
expected complete-data term is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .data import HyperParams, PooledDesign
from .errors import ConfigurationError, DimensionMismatchError
from .kernels import KernelConfig, chol_lower, chol_spd, gram, spd_logdet
from .noise import NoiseMatrix

CRITERIA = ("mu_alpha_delta", "per_task_alpha_delta")

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class EMConfig:
    """Inner-loop convergence control.

    ``criterion`` selects which relative change is monitored: the shared mean
    (threshold ``t1``) or the worst per-task weight estimate (threshold
    ``t2``).  Changes are scaled by (norm + 1) so the thresholds behave the
    same near zero.
    """

    t1: float = 1e-6
    t2: float = 1e-6
    k1_max: int = 200
    criterion: str = "mu_alpha_delta"

    def __post_init__(self):
        if self.t1 <= 0 or self.t2 <= 0:
            raise ConfigurationError("EM thresholds must be > 0")
        if self.k1_max < 1:
            raise ConfigurationError("k1_max must be >= 1")
        if self.criterion not in CRITERIA:
            raise ConfigurationError(
                f"unknown criterion {self.criterion!r}; choose one of {CRITERIA}"
            )


@dataclass
class EMTrace:
    """Per-iteration record: (index, objective, rel ||d mu||, max rel ||d alpha_l||)."""

    iterations: list[tuple[int, float, float, float]] = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.iterations)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([row[1] for row in self.iterations])

    def to_table(self) -> str:
        lines = ["iteration\tobjective\tmu_alpha_delta\talpha_delta"]
        for k, obj, dmu, dal in self.iterations:
            lines.append(f"{k}\t{obj:.17g}\t{dmu:.17g}\t{dal:.17g}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class EMState:
    """Shared moments plus per-task posterior weight moments.

    ``mu_w``/``c_w`` hold the same shared moments in the internal whitened
    coordinates; warm restarts use them directly, avoiding a round trip
    through the ill-conditioned raw parameterization.
    """

    mu_alpha: np.ndarray  # (n,)
    c_alpha: np.ndarray  # (n, n)
    alpha_hat: Mapping[int, np.ndarray]  # task id -> (n,)
    c_alpha_l: Mapping[int, np.ndarray]  # task id -> (n, n)
    kappa: np.ndarray  # (n, n) base Gram on the pooled design
    kappa_inv: np.ndarray  # (n, n)
    mu_w: np.ndarray | None = None  # (n,) whitened shared mean
    c_w: np.ndarray | None = None  # (n, n) whitened shared covariance


def _noise_diag(noise) -> np.ndarray:
    if isinstance(noise, NoiseMatrix):
        return noise.diag
    return np.asarray(noise, dtype=float).reshape(-1)


def _floor_noise(diag: np.ndarray, etas: Sequence[np.ndarray]) -> np.ndarray:
    # the E-step inverts the noise, so nonpositive entries get a floor tied
    # to the response scale
    stacked = np.concatenate([np.asarray(e, dtype=float).reshape(-1) for e in etas])
    var = float(np.var(stacked)) if stacked.size else 0.0
    floor = 1e-12 * var if var > 0 else 1e-12
    return np.maximum(diag, floor)


def e_step(
    kappa_l: np.ndarray,
    noise_l,
    eta_l: np.ndarray,
    mu_alpha: np.ndarray,
    c_alpha: np.ndarray,
    jitter: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of one task's weights.

    Solves (kappa_l' D^-1 kappa_l + C^-1) alpha = kappa_l' D^-1 eta + C^-1 mu
    by symmetric factorization; the system matrix inverse is the posterior
    covariance.
    """
    kappa_l = np.atleast_2d(np.asarray(kappa_l, dtype=float))
    eta_l = np.asarray(eta_l, dtype=float).reshape(-1)
    mu_alpha = np.asarray(mu_alpha, dtype=float).reshape(-1)
    d = _floor_noise(_noise_diag(noise_l), [eta_l])
    if kappa_l.shape[0] != eta_l.size or kappa_l.shape[0] != d.size:
        raise DimensionMismatchError(
            f"kappa_l rows {kappa_l.shape[0]} must match eta ({eta_l.size}) "
            f"and noise ({d.size})"
        )
    if kappa_l.shape[1] != mu_alpha.size:
        raise DimensionMismatchError(
            f"kappa_l columns {kappa_l.shape[1]} must match mu_alpha "
            f"({mu_alpha.size})"
        )
    n = mu_alpha.size
    c_chol = chol_spd(c_alpha, jitter)
    c_inv = cho_solve(c_chol, np.eye(n))
    c_inv = 0.5 * (c_inv + c_inv.T)
    kt_dinv = kappa_l.T / d  # (n, n_l)
    a = kt_dinv @ kappa_l + c_inv
    a = 0.5 * (a + a.T)
    a_chol = chol_spd(a, jitter)
    c_alpha_l = cho_solve(a_chol, np.eye(n))
    c_alpha_l = 0.5 * (c_alpha_l + c_alpha_l.T)
    rhs = kt_dinv @ eta_l + c_inv @ mu_alpha
    alpha_hat = cho_solve(a_chol, rhs)
    return alpha_hat, c_alpha_l


def m_step(
    alpha_hats: Sequence[np.ndarray],
    c_alpha_ls: Sequence[np.ndarray],
    kappa_inv: np.ndarray,
    lam: float,
    nu: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Shared-moment updates from the per-task posteriors.

    mu = sum alpha_l / (lam + m);
    C = [lam mu mu' + nu K^-1 + sum C_l + sum (alpha_l - mu)(alpha_l - mu)'] / (nu + m).
    """
    m = len(alpha_hats)
    if m < 1 or len(c_alpha_ls) != m:
        raise ConfigurationError("m_step needs aligned, non-empty posterior lists")
    alpha_hats = [np.asarray(a, dtype=float).reshape(-1) for a in alpha_hats]
    mu = np.sum(alpha_hats, axis=0) / (lam + m)
    scatter = sum(np.outer(a - mu, a - mu) for a in alpha_hats)
    c = (lam * np.outer(mu, mu) + nu * kappa_inv + sum(c_alpha_ls) + scatter) / (
        nu + m
    )
    return mu, 0.5 * (c + c.T)


def penalized_objective(
    mu_alpha: np.ndarray,
    c_alpha: np.ndarray,
    alpha_hats: Sequence[np.ndarray],
    c_alpha_ls: Sequence[np.ndarray],
    kappa_ls: Sequence[np.ndarray],
    noise_diags: Sequence[np.ndarray],
    etas: Sequence[np.ndarray],
    kappa_inv: np.ndarray,
    lam: float,
    nu: float,
    jitter: float = 1e-10,
) -> float:
    """EM lower bound: expected complete-data log-likelihood under the
    per-task posteriors, plus their entropy, plus the prior log-kernel.

    The normalizing constant of the prior (which depends only on lam, nu, and
    the kernel, never on the estimated moments) is dropped.  The posterior
    entropy is an additive constant during each M-step, so optimality
    comparisons at fixed posteriors are unaffected by its presence; with it,
    the value is the bound EM ascends at every step.
    """
    mu_alpha = np.asarray(mu_alpha, dtype=float).reshape(-1)
    n = mu_alpha.size
    m = len(alpha_hats)
    c_chol = chol_spd(c_alpha, jitter)
    c_inv = cho_solve(c_chol, np.eye(n))
    c_inv = 0.5 * (c_inv + c_inv.T)
    # logdet from the same factorization that produced the inverse
    logdet_c = 2.0 * float(np.sum(np.log(np.diag(c_chol[0]))))

    total = -(m / 2.0) * (logdet_c + float(mu_alpha @ c_inv @ mu_alpha))
    for alpha, c_l, kappa_l, d_raw, eta in zip(
        alpha_hats, c_alpha_ls, kappa_ls, noise_diags, etas
    ):
        alpha = np.asarray(alpha, dtype=float).reshape(-1)
        eta = np.asarray(eta, dtype=float).reshape(-1)
        d = _floor_noise(np.asarray(d_raw, dtype=float).reshape(-1), [eta])
        n_l = eta.size
        total += -0.5 * ((n_l + n) * _LOG_2PI + float(np.sum(np.log(d))))
        total += -0.5 * float(eta @ (eta / d))
        kt_dinv = kappa_l.T / d
        a = kt_dinv @ kappa_l + c_inv
        rhs = kt_dinv @ eta + c_inv @ mu_alpha
        total += -0.5 * (
            float(np.trace(a @ c_l)) + float(alpha @ a @ alpha) - 2.0 * float(alpha @ rhs)
        )
        # posterior entropy (M-step constant; see docstring)
        total += 0.5 * (n * (_LOG_2PI + 1.0) + spd_logdet(np.asarray(c_l, dtype=float), jitter))
    # prior log-kernel on the shared moments
    total += -(nu / 2.0) * (logdet_c + float(np.trace(kappa_inv @ c_inv)))
    total += -(lam / 2.0) * float(mu_alpha @ c_inv @ mu_alpha)
    return float(total)


def implied_field_moments(
    kappa: np.ndarray, mu_alpha: np.ndarray, c_alpha: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Field mean and covariance on the design implied by the weight moments."""
    mu = kappa @ mu_alpha
    sigma = kappa @ c_alpha @ kappa
    return mu, 0.5 * (sigma + sigma.T)


def run_em(
    residuals: Mapping[int, np.ndarray],
    noises: Mapping[int, NoiseMatrix | np.ndarray],
    pooled: PooledDesign,
    kernel_cfg: KernelConfig,
    hyper: HyperParams,
    config: EMConfig | None = None,
    init: EMState | tuple[np.ndarray, np.ndarray] | None = None,
    gram_cache: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[EMState, EMTrace]:
    """Fit the shared residual field to detrended per-task sample means.

    ``residuals`` and ``noises`` are keyed by task id; each task's rows must
    align with ``pooled.index_maps``.  ``init`` optionally supplies starting
    shared moments: either a previous EMState (restarted in the whitened
    coordinates, which is exact when the same gram_cache is reused) or a raw
    (mu_alpha, c_alpha) pair; the default start is the prior mean (zero
    mean, inverse-Gram covariance).  ``gram_cache`` lets an outer loop reuse
    the pooled (kappa, chol_factor) pair across repeated fits.

    Internally the iteration runs in the whitened weight coordinates
    w = L' alpha, where L is the (regularized) Cholesky factor of the pooled
    Gram matrix.  There the per-task design is a row selection of L and the
    prior scale matrix is the identity, so the linear algebra never touches
    the explicitly inverted Gram; results are transformed back afterwards.
    The recorded objective equals the original-coordinate value (the change
    of variables shifts it by nu * log det L, which is added back).
    """
    if config is None:
        config = EMConfig(t1=hyper.t1, t2=hyper.t2, k1_max=hyper.k1_max)
    task_ids = sorted(residuals.keys())
    if not task_ids:
        raise ConfigurationError("run_em needs at least one task")
    if sorted(noises.keys()) != task_ids:
        raise ConfigurationError("residuals and noises must cover the same tasks")

    n = pooled.n
    if gram_cache is None:
        kappa = gram(kernel_cfg, pooled.points)
        chol = chol_lower(kappa, hyper.jitter)
    else:
        kappa, chol = gram_cache
    logdet_l = float(np.sum(np.log(np.diag(chol))))
    eye = np.eye(n)

    def unwhiten_vec(w):  # alpha = L^-T w
        return solve_triangular(chol, w, lower=True, trans="T")

    def unwhiten_mat(cw):  # C = L^-T Cw L^-1
        half = solve_triangular(chol, cw, lower=True, trans="T")
        out = solve_triangular(chol, half.T, lower=True, trans="T").T
        return 0.5 * (out + out.T)

    etas, diags, chol_ls = [], [], []
    for tid in task_ids:
        eta = np.asarray(residuals[tid], dtype=float).reshape(-1)
        rows = pooled.rows_for(tid)
        if eta.size != rows.size:
            raise DimensionMismatchError(
                f"task {tid}: {eta.size} residuals for {rows.size} design rows"
            )
        etas.append(eta)
        diags.append(_noise_diag(noises[tid]))
        chol_ls.append(chol[rows, :])
    diags = [_floor_noise(d, etas) for d in diags]

    if init is None:
        mu_w = np.zeros(n)
        c_w = eye.copy()
    elif isinstance(init, EMState) and init.c_w is not None:
        if init.mu_w.size != n or init.c_w.shape != (n, n):
            raise DimensionMismatchError("init moments do not match the pooled size")
        mu_w = init.mu_w.copy()
        c_w = init.c_w.copy()
    else:
        pair = (init.mu_alpha, init.c_alpha) if isinstance(init, EMState) else init
        mu0 = np.asarray(pair[0], dtype=float).reshape(-1)
        c0 = np.asarray(pair[1], dtype=float)
        if mu0.size != n or c0.shape != (n, n):
            raise DimensionMismatchError("init moments do not match the pooled size")
        mu_w = chol.T @ mu0
        c_w = chol.T @ c0 @ chol
        c_w = 0.5 * (c_w + c_w.T)

    trace = EMTrace()
    mu_prev = unwhiten_vec(mu_w)
    prev_alphas = [np.zeros(n) for _ in task_ids]

    for k in range(1, config.k1_max + 1):
        w_hats, c_w_ls = [], []
        for chol_l, d, eta in zip(chol_ls, diags, etas):
            w_hat, c_wl = e_step(chol_l, d, eta, mu_w, c_w, jitter=hyper.jitter)
            w_hats.append(w_hat)
            c_w_ls.append(c_wl)
        mu_w, c_w = m_step(w_hats, c_w_ls, eye, hyper.lam, hyper.nu)
        obj = (
            penalized_objective(
                mu_w,
                c_w,
                w_hats,
                c_w_ls,
                chol_ls,
                diags,
                etas,
                eye,
                hyper.lam,
                hyper.nu,
                jitter=hyper.jitter,
            )
            + hyper.nu * logdet_l
        )
        mu_now = unwhiten_vec(mu_w)
        alphas_now = [unwhiten_vec(w) for w in w_hats]
        d_mu = float(np.linalg.norm(mu_now - mu_prev) / (np.linalg.norm(mu_now) + 1.0))
        d_alpha = max(
            float(np.linalg.norm(a - p) / (np.linalg.norm(a) + 1.0))
            for a, p in zip(alphas_now, prev_alphas)
        )
        trace.iterations.append((k, obj, d_mu, d_alpha))
        mu_prev = mu_now
        prev_alphas = alphas_now
        if config.criterion == "mu_alpha_delta" and d_mu < config.t1:
            trace.converged = True
            trace.stop_reason = "mu_alpha_delta below t1"
            break
        if config.criterion == "per_task_alpha_delta" and d_alpha < config.t2:
            trace.converged = True
            trace.stop_reason = "per_task_alpha_delta below t2"
            break
    else:
        trace.stop_reason = "reached k1_max"

    # refresh the per-task posteriors so they correspond to the final moments,
    # then return everything in the original weight coordinates
    final_alphas, final_cls = {}, {}
    for tid, chol_l, d, eta in zip(task_ids, chol_ls, diags, etas):
        w_hat, c_wl = e_step(chol_l, d, eta, mu_w, c_w, jitter=hyper.jitter)
        final_alphas[tid] = unwhiten_vec(w_hat)
        final_cls[tid] = unwhiten_mat(c_wl)
    kappa_inv = unwhiten_mat(eye)
    state = EMState(
        mu_alpha=unwhiten_vec(mu_w),
        c_alpha=unwhiten_mat(c_w),
        alpha_hat=final_alphas,
        c_alpha_l=final_cls,
        kappa=kappa,
        kappa_inv=kappa_inv,
        mu_w=mu_w,
        c_w=c_w,
    )
    return state, trace
