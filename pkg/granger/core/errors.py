"""Exception hierarchy shared by every granger service.

Each error also derives from the builtin a caller would naturally catch
(ValueError, RuntimeError, ArithmeticError), so ``except ValueError`` keeps
working for code that does not know about this module.
"""

from typing import Optional


class GrangerError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(GrangerError, ValueError):
    """A primitive or model received operands whose shapes do not conform."""

    def __init__(self, primitive: str, *shapes: tuple) -> None:
        self.primitive = primitive
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {rendered}")


class NumericError(GrangerError, ArithmeticError):
    """A computation produced or consumed a NaN/Inf value."""


class UsageError(GrangerError, ValueError):
    """An API was called out of order or with arguments outside its domain."""


class ConfigError(GrangerError, ValueError):
    """A model, penalty or factor configuration is internally inconsistent."""


class StructureError(GrangerError, ValueError):
    """Penalty groups do not partition into the expected lag subgroups."""


class GenerationError(GrangerError, RuntimeError):
    """A simulator could not produce a valid process."""


class IntegrationError(GrangerError, RuntimeError):
    """An ODE trajectory left the numerically sane region."""


class FormatError(GrangerError, ValueError):
    """An input file does not follow its documented format."""

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        column: Optional[str] = None,
    ) -> None:
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class TrainingDivergedError(NumericError):
    """The penalized loss became non-finite during training."""

    def __init__(self, epoch: int, last_finite_epoch: int) -> None:
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch
        super().__init__(
            f"loss became non-finite at epoch {epoch}; "
            f"last finite epoch was {last_finite_epoch}"
        )


class GridSearchError(GrangerError, RuntimeError):
    """Every point of a hyperparameter grid failed."""

    def __init__(self, message: str, failures: Optional[list[str]] = None) -> None:
        self.failures = failures or []
        super().__init__(message)


class UndefinedMetricError(GrangerError, ValueError):
    """A ranking metric is undefined for the given labels."""
