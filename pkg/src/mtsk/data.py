"""Core data model: fidelity sources, replicated measurements, task datasets,
pooled designs, hyperparameters, and fitted model state.

All containers are frozen dataclasses holding numpy arrays; they are immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionMismatchError

Locations = np.ndarray  # (k, d) float array
BasisFn = Callable[[np.ndarray], np.ndarray]  # (k, d) -> (k, p)


def as_locations(x, d: int | None = None) -> Locations:
    """Coerce one location or an array of locations to a (k, d) float array."""
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    if d is not None and arr.shape[1] != d:
        raise DimensionMismatchError(
            f"expected locations of dimension {d}, got shape {arr.shape}"
        )
    return arr


@dataclass(frozen=True)
class FidelitySpec:
    """A measurement source (gauge) with a known intrinsic standard deviation.

    ``sigma`` is expressed in response units.  ``declared_variance_known``
    marks gauges whose repeatability was characterized up front (e.g. by a
    gauge study) so the declared value is preferred over replicate sample
    variance.
    """

    id: str
    sigma: float
    declared_variance_known: bool = False

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigurationError(f"fidelity {self.id!r}: sigma must be >= 0")

    @property
    def variance(self) -> float:
        return self.sigma**2


@dataclass(frozen=True)
class Measurement:
    """Replicated observations of the response at one location."""

    location: np.ndarray  # (d,)
    replicates: np.ndarray  # (n_rep,), n_rep >= 1
    fidelity_id: str

    def __post_init__(self):
        loc = np.asarray(self.location, dtype=float).reshape(-1)
        reps = np.asarray(self.replicates, dtype=float).reshape(-1)
        if reps.size < 1:
            raise ConfigurationError("a measurement needs at least one replicate")
        object.__setattr__(self, "location", loc)
        object.__setattr__(self, "replicates", reps)

    @property
    def n_replicates(self) -> int:
        return self.replicates.size

    @property
    def mean(self) -> float:
        return float(self.replicates.mean())


@dataclass(frozen=True)
class TaskDataset:
    """One task: its design points, replicated observations, and trend basis.

    ``basis`` maps a (k, d) location array to the (k, p) matrix of basis
    values; dedicated constructors for the common families live in
    :mod:`mtsk.basis`.  ``domain_lo``/``domain_hi`` declare the task's box;
    measurement locations must lie inside it.
    """

    task_id: int
    measurements: tuple[Measurement, ...]
    basis: BasisFn
    domain_lo: np.ndarray
    domain_hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.domain_lo, dtype=float).reshape(-1)
        hi = np.asarray(self.domain_hi, dtype=float).reshape(-1)
        object.__setattr__(self, "measurements", tuple(self.measurements))
        object.__setattr__(self, "domain_lo", lo)
        object.__setattr__(self, "domain_hi", hi)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ConfigurationError(f"task {self.task_id}: invalid domain box")
        d = lo.size
        tol = 1e-9 * (1.0 + float(np.linalg.norm(hi - lo)))
        for m in self.measurements:
            if m.location.size != d:
                raise DimensionMismatchError(
                    f"task {self.task_id}: measurement at {m.location} has "
                    f"dimension {m.location.size}, expected {d}"
                )
            if np.any(m.location < lo - tol) or np.any(m.location > hi + tol):
                raise ConfigurationError(
                    f"task {self.task_id}: location {m.location} outside domain box"
                )

    @property
    def dimension(self) -> int:
        return self.domain_lo.size

    @property
    def n_points(self) -> int:
        return len(self.measurements)

    @property
    def locations(self) -> Locations:
        if not self.measurements:
            return np.zeros((0, self.dimension))
        return np.stack([m.location for m in self.measurements])

    def basis_values(self, locations: Locations | None = None) -> np.ndarray:
        """Basis matrix U (k, p) at the given (default: design) locations."""
        locs = self.locations if locations is None else as_locations(locations, self.dimension)
        u = np.atleast_2d(np.asarray(self.basis(locs), dtype=float))
        if u.shape[0] != locs.shape[0]:
            raise DimensionMismatchError(
                f"task {self.task_id}: basis returned shape {u.shape} "
                f"for {locs.shape[0]} locations"
            )
        if u.shape[1] < 1:
            raise ConfigurationError(f"task {self.task_id}: basis must have p >= 1")
        return u


def sample_means(task: TaskDataset) -> np.ndarray:
    """Vector of per-point arithmetic means of the replicated responses."""
    return np.array([m.mean for m in task.measurements], dtype=float)


@dataclass(frozen=True)
class PooledDesign:
    """Deduplicated union of all tasks' design points.

    ``index_maps[task_id][i]`` is the pooled row holding (a representative
    within ``tau_dup`` of) row ``i`` of that task's design.
    """

    points: Locations  # (n, d)
    index_maps: Mapping[int, np.ndarray]
    tau_dup: float

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def rows_for(self, task_id: int) -> np.ndarray:
        return np.asarray(self.index_maps[task_id], dtype=int)


def pool_designs(tasks: Sequence[TaskDataset], tau_dup: float) -> PooledDesign:
    """Merge all tasks' design points into one deduplicated set.

    Points closer than ``tau_dup`` (Euclidean) are identified; the first-seen
    location is kept as the representative.  Index maps reconstruct each
    task's rows from the pooled set.
    """
    if not tasks:
        raise ConfigurationError("pool_designs requires at least one task")
    if tau_dup <= 0:
        raise ConfigurationError("tau_dup must be > 0")
    d = tasks[0].dimension
    for t in tasks:
        if t.dimension != d:
            raise DimensionMismatchError(
                f"task {t.task_id} has dimension {t.dimension}, expected {d}"
            )

    points: list[np.ndarray] = []
    index_maps: dict[int, np.ndarray] = {}
    for t in tasks:
        rows = np.empty(t.n_points, dtype=int)
        for i, m in enumerate(t.measurements):
            hit = -1
            if points:
                dist = np.linalg.norm(np.asarray(points) - m.location, axis=1)
                j = int(np.argmin(dist))
                if dist[j] <= tau_dup:
                    hit = j
            if hit < 0:
                points.append(m.location)
                hit = len(points) - 1
            rows[i] = hit
        index_maps[t.task_id] = rows
    pooled = np.stack(points) if points else np.zeros((0, d))
    return PooledDesign(points=pooled, index_maps=index_maps, tau_dup=tau_dup)


def default_tau_dup(tasks: Sequence[TaskDataset]) -> float:
    """Dedup tolerance: 1e-9 times the overall domain diagonal."""
    lo = np.min([t.domain_lo for t in tasks], axis=0)
    hi = np.max([t.domain_hi for t in tasks], axis=0)
    diag = float(np.linalg.norm(hi - lo))
    return 1e-9 * max(diag, 1.0)


@dataclass(frozen=True)
class HyperParams:
    """Model hyperparameters and numerical controls.

    ``delta_sq`` is the squared-exponential length-scale; ``nu`` and ``lam``
    parameterize the hyperprior on the shared residual-field moments.
    ``t1``/``t2`` control inner (EM) convergence, ``t3``/``t4`` the outer
    trend loop; all four are relative thresholds.
    """

    delta_sq: float = 80.0
    nu: float = 1.0
    lam: float = 0.001
    t1: float = 1e-6
    t2: float = 1e-6
    t3: float = 1e-4
    t4: float = 1e-4
    k1_max: int = 200
    k2_max: int = 5
    jitter: float = 1e-10

    def __post_init__(self):
        for name in ("delta_sq", "nu", "lam", "t1", "t2", "t3", "t4", "jitter"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"HyperParams.{name} must be > 0")
        if self.k1_max < 1 or self.k2_max < 1:
            raise ConfigurationError("iteration caps must be >= 1")


@dataclass(frozen=True)
class TaskState:
    """Fitted per-task quantities."""

    alpha_hat: np.ndarray  # (n,)
    c_alpha_l: np.ndarray  # (n, n)
    beta_hat: np.ndarray  # (p_l,)
    noise_diag: np.ndarray  # (n_l,) intrinsic variance of the sample means
    locations: Locations  # (n_l, d)
    basis_values: np.ndarray  # (n_l, p_l)
    eta: np.ndarray  # (n_l,) residual targets the field was fitted to
    domain_lo: np.ndarray = field(default=None)  # type: ignore[assignment]
    domain_hi: np.ndarray = field(default=None)  # type: ignore[assignment]


@dataclass(frozen=True)
class ModelState:
    """Fitted model: shared residual-field moments plus per-task state.

    ``mu_alpha``/``c_alpha`` are the shared weight-space moments over the
    pooled design; per-task entries live in ``tasks`` keyed by task id.
    """

    pooled: PooledDesign
    mu_alpha: np.ndarray  # (n,)
    c_alpha: np.ndarray  # (n, n)
    tasks: Mapping[int, TaskState]

    @property
    def n(self) -> int:
        return self.pooled.n

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def task_ids(self) -> list[int]:
        return list(self.tasks.keys())

    def with_moments(self, mu_alpha: np.ndarray, c_alpha: np.ndarray) -> "ModelState":
        return replace(self, mu_alpha=mu_alpha, c_alpha=c_alpha)
