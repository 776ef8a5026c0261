"""Spatial kernels, Gram-matrix utilities, and the pooled composite covariance.

The residual field uses a squared-exponential kernel

    kappa(x, x') = exp(-||x - x'||^2 / delta_sq)

with a single squared length-scale ``delta_sq`` shared across coordinates.
After fitting, the field covariance at arbitrary locations is a convex blend
of the learned weight-space covariance and the base kernel; see
:func:`composite_covariance`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cholesky
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, KernelDegeneracyError

_SYMMETRY_RTOL = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "squared_exponential"
    delta_sq: float = 80.0

    def __post_init__(self):
        if self.kind != "squared_exponential":
            raise ConfigurationError(f"unknown kernel kind {self.kind!r}")
        if self.delta_sq <= 0:
            raise ConfigurationError("delta_sq must be > 0")


def eval_kernel(cfg: KernelConfig, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kernel matrix kappa(a_i, b_j) of shape (len(a), len(b))."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(
            f"kernel inputs disagree on dimension: {a.shape} vs {b.shape}"
        )
    sq = cdist(a, b, metric="sqeuclidean")
    return np.exp(-sq / cfg.delta_sq)


def gram(cfg: KernelConfig, a: np.ndarray) -> np.ndarray:
    """Symmetric kernel matrix on one point set, exact unit diagonal."""
    k = eval_kernel(cfg, a, a)
    k = 0.5 * (k + k.T)
    if k.shape[0]:
        np.fill_diagonal(k, 1.0)
    return k


def _check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise KernelDegeneracyError(f"expected a square matrix, got shape {m.shape}")
    scale = np.abs(m).max(initial=0.0) + 1.0
    if np.abs(m - m.T).max(initial=0.0) > _SYMMETRY_RTOL * scale:
        raise KernelDegeneracyError("matrix is not symmetric")
    return 0.5 * (m + m.T)


def _jitter_ladder(m: np.ndarray, jitter: float, max_tries: int):
    # eps scales with the matrix so tiny covariances are not swamped
    scale = max(float(np.mean(np.abs(np.diag(m)))), 1.0) if m.shape[0] else 1.0
    eps = 0.0
    for k in range(max_tries + 1):
        try:
            shifted = m if eps == 0.0 else m + eps * np.eye(m.shape[0])
            return shifted, cholesky(shifted, lower=True), eps
        except np.linalg.LinAlgError:
            eps = jitter * scale * 10.0**k
    raise KernelDegeneracyError(
        f"matrix is not positive definite even after adding {eps:.3e} to the "
        f"diagonal"
    )


def regularize_spd(
    m: np.ndarray, jitter: float = 1e-10, max_tries: int = 5
) -> np.ndarray:
    """Return ``m`` (symmetrized) with the smallest diagonal shift that makes
    it factor; raises :class:`KernelDegeneracyError` if the jitter ladder
    (jitter, 10*jitter, ..., up to ``max_tries`` steps) is exhausted."""
    m = _check_symmetric(m)
    shifted, _, _ = _jitter_ladder(m, jitter, max_tries)
    return shifted


def chol_spd(m: np.ndarray, jitter: float = 1e-10, max_tries: int = 5):
    """Cholesky factor of ``m`` after minimal regularization.

    Returns a ``(c, lower)`` pair usable with ``scipy.linalg.cho_solve``.
    """
    m = _check_symmetric(m)
    shifted, _, _ = _jitter_ladder(m, jitter, max_tries)
    return cho_factor(shifted, lower=True)


def chol_lower(m: np.ndarray, jitter: float = 1e-10, max_tries: int = 5) -> np.ndarray:
    """Plain lower-triangular Cholesky factor after minimal regularization."""
    m = _check_symmetric(m)
    _, lower, _ = _jitter_ladder(m, jitter, max_tries)
    return lower


def spd_logdet(m: np.ndarray, jitter: float = 1e-10) -> float:
    """log det of a symmetric positive-definite matrix via Cholesky."""
    m = _check_symmetric(m)
    _, lower, _ = _jitter_ladder(m, jitter, 5)
    return 2.0 * float(np.sum(np.log(np.diag(lower))))


def composite_covariance(
    cfg: KernelConfig,
    points: np.ndarray,
    c_alpha: np.ndarray,
    n_tasks: int,
    nu: float,
    a: np.ndarray,
    b: np.ndarray | None = None,
) -> np.ndarray:
    """Field covariance at arbitrary locations from the fitted weight moments.

    Blends the data-driven covariance (kernel-weighted ``c_alpha`` on the
    pooled design ``points``) with the prior kernel, weighting the former by
    the number of tasks and the latter by the prior strength ``nu``:

        ( n_tasks * K(a)^T C_alpha K(b) + nu * kappa(a, b) ) / (n_tasks + nu)

    where K(a) = kappa(points, a).  With ``b`` omitted the result is
    symmetrized.
    """
    if n_tasks < 1:
        raise ConfigurationError("n_tasks must be >= 1")
    if nu <= 0:
        raise ConfigurationError("nu must be > 0")
    symmetric = b is None
    b_arr = a if symmetric else b
    k_a = eval_kernel(cfg, points, a)
    k_b = k_a if symmetric else eval_kernel(cfg, points, b_arr)
    learned = k_a.T @ c_alpha @ k_b
    prior = eval_kernel(cfg, a, b_arr)
    out = (n_tasks * learned + nu * prior) / (n_tasks + nu)
    if symmetric:
        out = 0.5 * (out + out.T)
    return out
