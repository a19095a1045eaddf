"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data problems exit 2, numeric or contract violations exit 3.
"""


class CruseKDError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(CruseKDError, ValueError):
    """Invalid model, schedule or run configuration."""


class ShapeError(CruseKDError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class DataError(CruseKDError):
    """Audio or manifest input that cannot be used."""


class LengthError(DataError, ValueError):
    """Signal shorter than the minimum an operation needs."""


class UnmixableError(DataError):
    """Noise clip is silent under loudness gating and cannot be scaled."""


class ContractError(CruseKDError, RuntimeError):
    """Internal contract violated (gradient leak into a frozen model, non-scalar objective, ...)."""


class UndefinedMetricError(CruseKDError, ValueError):
    """Metric is undefined for the given input (silent reference, zero variance)."""
