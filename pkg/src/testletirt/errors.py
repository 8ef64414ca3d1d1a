"""Exception types shared across estimators."""


class TestletError(Exception):
    """Base class for all package errors."""


class InvalidDesign(TestletError, ValueError):
    pass


class HeywoodError(TestletError, ArithmeticError):
    """A fitted communality reached or exceeded one (negative residual variance)."""

    def __init__(self, message, items=()):
        super().__init__(message)
        self.items = tuple(items)


class DegenerateLoading(TestletError, ArithmeticError):
    """Loading too close to zero for the difficulty to be defined."""


class DegenerateData(TestletError, ValueError):
    """Empty data, or an item answered identically by every person."""


class NonConvergence(TestletError, RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ChainDivergence(TestletError, FloatingPointError):
    pass


class ZeroVariance(TestletError, ArithmeticError):
    """Within-chain variance is zero so the PSRF is undefined."""


class BoundarySolution(UserWarning):
    """A tetrachoric estimate was clamped to the correlation bound."""
