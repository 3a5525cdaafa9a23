"""Exception hierarchy shared by every dpvar module.

The CLI maps :class:`UsageError` to exit status 1 and every other
:class:`DpvarError` to exit status 2.
"""


class DpvarError(Exception):
    """Base class for all library errors."""


class UsageError(DpvarError, ValueError):
    """Invalid arguments or malformed input supplied by the caller."""


class ConfigurationError(DpvarError):
    """Discretization or solver settings that cannot represent the problem."""


class NumericalRangeError(DpvarError, ArithmeticError):
    """A result overflowed or became non-finite."""


class ResourceError(DpvarError):
    """A computation would exceed a configured size limit."""


class UnattainableTargetError(DpvarError):
    """The requested delta is below what the discretized distribution can certify."""


class CalibrationError(DpvarError):
    """No noise multiplier in the search bracket achieves the target."""


class DegenerateMetricError(DpvarError):
    """A metric is undefined for the given data (e.g. zero denominator)."""


class UndefinedCorrelationError(DegenerateMetricError):
    """Rank correlation of a constant vector."""


class SingularDesignError(DpvarError):
    """Regression design matrix is rank deficient."""


class DivergenceError(DpvarError):
    """Training produced a non-finite loss."""


class ParseError(UsageError):
    """A pool file line could not be parsed."""


class ValidationError(UsageError):
    """Parsed input violates a data invariant."""
