"""Exception hierarchy shared across the package."""


class DdmpcError(Exception):
    """Base class for all package errors."""


class InvalidMatrix(DdmpcError, ValueError):
    pass


class DimensionMismatch(DdmpcError, ValueError):
    pass


class InsufficientData(DdmpcError, ValueError):
    pass


class Infeasible(DdmpcError):
    pass


class Unbounded(DdmpcError):
    pass


class MaxIterations(DdmpcError):
    pass


class NonFiniteEvaluation(DdmpcError, FloatingPointError):
    pass


class NonFiniteState(DdmpcError, FloatingPointError):
    pass


class DegenerateHankel(DdmpcError):
    pass


class SingularSteadyState(DdmpcError):
    pass


class NoSteadyStateFound(DdmpcError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(DdmpcError, ValueError):
    """Raised for invalid experiment configurations; ``field`` names the key path."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class SolverFailure(DdmpcError):
    """Wraps a solver error raised inside the closed loop, tagged with the instant."""

    def __init__(self, instant, cause):
        super().__init__(f"solver failed at instant k={instant}: {cause}")
        self.instant = instant
        self.cause = cause


class RankDeficientWarning(UserWarning):
    """Data matrix used in a least-squares fit is rank deficient."""


class ExcitationWarning(UserWarning):
    """Input is not persistently exciting of the requested order."""
