"""Exception types raised across the package."""


class HestonFqiError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(HestonFqiError, ValueError):
    """A parameter or configuration value violates its documented invariant."""


class DataFormatError(HestonFqiError, ValueError):
    """An input file could not be parsed; the message carries the line number."""


class EstimationError(HestonFqiError, ArithmeticError):
    """A closed-form or filtered estimate is undefined for the given data."""


class NumericalDegeneracyError(EstimationError):
    """The Kalman gain denominator collapsed below machine range."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class InfeasibleActionError(HestonFqiError, ValueError):
    """A trade would push the holding outside the permitted range."""


class PriceAlignmentError(HestonFqiError, ValueError):
    """A price is not an integer multiple of the tick size."""
