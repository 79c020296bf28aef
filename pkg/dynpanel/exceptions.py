"""
Exception classes and error handling utilities for dynpanel.

Errors fall into three families that the CLI maps onto exit codes:
usage (1), data (2) and numerical (3).
"""

from functools import wraps
from typing import Callable, Iterable, ParamSpec, TypeVar

import numpy as np

P = ParamSpec("P")
T = TypeVar("T")


class PanelError(Exception):
    """Base exception for dynpanel errors."""

    exit_code = 1


class UsageError(PanelError):
    """Invalid option or combination of options."""

    exit_code = 1


class DataError(PanelError):
    """Input data does not satisfy the requirements of an operation."""

    exit_code = 2


class NumericalError(PanelError):
    """A numerical routine could not produce a valid result."""

    exit_code = 3


class InvalidConfig(UsageError):
    """A configuration document violates its schema."""


class NoRegressors(UsageError):
    """A regression has no coefficient to estimate."""


class MissingCell(DataError):
    """One or more (entity, time, variable) cells are absent."""

    def __init__(self, cells: Iterable[tuple[str, int, str]]) -> None:
        self.cells = list(cells)
        listed = ", ".join(f"({e}, {t}, {v})" for e, t, v in self.cells)
        super().__init__(f"Missing {len(self.cells)} cell(s): {listed}")


class NonNumeric(DataError):
    """A cell could not be parsed as a number."""

    def __init__(self, row: int, column: str, value: str) -> None:
        self.row = row
        self.column = column
        super().__init__(f"Non-numeric value {value!r} at row {row}, column '{column}'")


class DuplicateCell(DataError):
    pass


class NonConsecutiveTime(DataError):
    pass


class UnknownVariable(DataError):
    pass


class LagTooLarge(DataError):
    pass


class SeriesTooShort(DataError):
    pass


class TooFewObservations(DataError):
    pass


class TooFewPeriods(DataError):
    pass


class MissingMoments(DataError):
    pass


class RankDeficient(NumericalError):
    """Design matrix columns are (numerically) collinear."""

    def __init__(self, columns: Iterable[str], message: str = "Rank-deficient design") -> None:
        self.columns = list(columns)
        super().__init__(f"{message}; collinear columns: {', '.join(self.columns)}")


class WeakInstrument(NumericalError):
    pass


class SingularWeighting(NumericalError):
    pass


class UnderIdentified(NumericalError):
    pass


class DegenerateVariance(NumericalError):
    pass


class DegenerateDenominator(NumericalError):
    pass


class InvalidAlpha(NumericalError):
    pass


class EmptyInstrumentSet(NumericalError):
    pass


class NotApplicable(NumericalError):
    pass


def handle_linalg_errors(stage: str) -> Callable[[Callable[P, T]], Callable[P, T]]:
    """
    Decorator to turn low-level numerical failures into NumericalError.

    Args:
        stage: Name of the computation, prepended to the error message.

    Returns:
        Decorated function that raises NumericalError on linear-algebra failures.
    """

    def decorator(func: Callable[P, T]) -> Callable[P, T]:
        @wraps(func)
        def wrapper(*args: P.args, **kwargs: P.kwargs) -> T:
            try:
                return func(*args, **kwargs)
            except np.linalg.LinAlgError as e:
                raise NumericalError(f"{stage}: {e}") from e
            except FloatingPointError as e:
                raise NumericalError(f"{stage}: floating point failure ({e})") from e

        return wrapper

    return decorator
