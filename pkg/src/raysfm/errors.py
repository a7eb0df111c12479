"""Exception types shared across the package.

The hierarchy mirrors how the CLI maps failures to exit codes:
ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class RaySfmError(Exception):
    """Base class for all package errors."""


class ConfigError(RaySfmError):
    """Bad configuration or invalid arguments."""


class DataError(RaySfmError):
    """Missing, inconsistent, or degenerate data."""


class NumericError(RaySfmError):
    """Numerical failure (NaN parameters, divergent solves)."""


class InvalidInputError(ConfigError):
    """An argument violates a precondition (non-finite, wrong shape, out of range)."""


class AtInfinityError(NumericError):
    """A homogeneous point has |w| below threshold and no Euclidean representation."""


class DegenerateSceneError(DataError):
    """Scene normalization is impossible (e.g. no valid depth in the first view)."""


class DegenerateRaysError(DataError):
    """Ray directions do not constrain a camera (rank-deficient solve)."""


class InsufficientDataError(DataError):
    """Too few valid samples for the requested operation."""


class DegenerateConfigurationError(DataError):
    """Point configuration does not determine a unique alignment."""


class InvalidPoseError(DataError):
    """A camera pose is unusable (e.g. camera center inside scene geometry)."""


class InvalidModelError(NumericError):
    """Model parameters are unusable (non-finite values)."""
