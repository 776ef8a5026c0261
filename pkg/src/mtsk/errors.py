"""Exception types raised by the mtsk library."""


class MtskError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(MtskError):
    """Inputs disagree on spatial dimension or vector length."""


class KernelDegeneracyError(MtskError):
    """A covariance matrix could not be made positive definite."""


class InsufficientReplicatesError(MtskError):
    """A variance estimate was requested from fewer than two replicates."""


class RankDeficientBasisError(MtskError):
    """The trend basis matrix has linearly dependent columns."""


class UnknownTaskError(MtskError):
    """A task id was requested that the model was not fitted on."""


class ConfigurationError(MtskError):
    """An experiment or model configuration is invalid."""
