"""Multi-task, multi-fidelity stochastic kriging for simulation and
measurement surrogates.

The package fits a shared spatial residual field across related tasks whose
observations carry heterogeneous, location-dependent noise, and exposes
single-task and homoscedastic multi-task baselines for comparison.
"""

from .basis import CallableRegressorBasis, ConstantBasis, LinearBasis, TabulatedBasis
from .data import (
    FidelitySpec,
    HyperParams,
    Measurement,
    ModelState,
    PooledDesign,
    TaskDataset,
    TaskState,
    default_tau_dup,
    pool_designs,
    sample_means,
)
from .errors import (
    ConfigurationError,
    DimensionMismatchError,
    InsufficientReplicatesError,
    KernelDegeneracyError,
    MtskError,
    RankDeficientBasisError,
    UnknownTaskError,
)

__version__ = "0.1.0"

__all__ = [
    "CallableRegressorBasis",
    "ConstantBasis",
    "LinearBasis",
    "TabulatedBasis",
    "FidelitySpec",
    "HyperParams",
    "Measurement",
    "ModelState",
    "PooledDesign",
    "TaskDataset",
    "TaskState",
    "default_tau_dup",
    "pool_designs",
    "sample_means",
    "ConfigurationError",
    "DimensionMismatchError",
    "InsufficientReplicatesError",
    "KernelDegeneracyError",
    "MtskError",
    "RankDeficientBasisError",
    "UnknownTaskError",
    "__version__",
]
