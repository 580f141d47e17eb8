"""Exception hierarchy shared by every module of the package."""


class MMVLabError(Exception):
    """Base class for all package errors."""


class ConfigError(MMVLabError):
    """Scenario document violates the schema; ``pointer`` names the offending field."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class DimensionMismatch(MMVLabError):
    pass


class Degenerate(MMVLabError):
    """Volatility matrix fails the nondegeneracy bound."""


class ResourceLimit(MMVLabError):
    pass


class NumericalError(MMVLabError):
    """Base for failures of a numerical gate."""


class NonFiniteState(NumericalError):
    pass


class NegativeRetention(NumericalError):
    pass


class PsiBelowMinusOne(NumericalError):
    pass


class LengthMismatch(NumericalError):
    pass


class QuadratureNonConvergence(NumericalError):
    pass


class RegressionIllConditioned(NumericalError):
    pass


class FloorViolation(NumericalError):
    pass


class SingularD(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class DegenerateMarket(NumericalError):
    """Y_0 is (numerically) 1, so the mean-variance dual is degenerate."""
