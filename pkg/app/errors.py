"""
Exception types shared across the tracker.

All of them derive from ValueError so callers that only care about
"bad input" can keep catching that.
"""

from typing import Optional, Tuple


class ShapeError(ValueError):
    """Tensor shapes, channel counts or spatial sizes do not line up."""


class NonFiniteError(ValueError):
    """An operation produced NaN or Inf."""


class DegenerateDenominatorError(ArithmeticError, ValueError):
    """A spectrum division hit a bin whose magnitude is below 1e-12."""


class DataError(ValueError):
    """Dataset, boxes file or weights file could not be read or is inconsistent."""


class TrackingError(ValueError):
    """Tracker input is unusable (degenerate box, frame too small)."""


class GradientCheckError(ValueError):
    """Analytic gradient is non-finite or disagrees with finite differences."""

    def __init__(self, message: str, input_index: Optional[int] = None,
                 coordinate: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.input_index = input_index
        self.coordinate = coordinate


class NonFiniteLossError(NonFiniteError):
    """Training loss became NaN or Inf; training is aborted."""
