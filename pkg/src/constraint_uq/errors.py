"""Exception types shared across the package."""

from __future__ import annotations


class ConstraintUQError(Exception):
    """Base class for all package errors."""


class ParseError(ConstraintUQError, ValueError):
    """Malformed constraint statement; carries a 1-based line and column."""

    def __init__(self, message: str, line: int = 1, column: int = 1):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class ConstraintError(ConstraintUQError, ValueError):
    """A constraint violates a structural invariant."""


class DomainError(ConstraintUQError, ArithmeticError):
    """Expression evaluated outside its domain (log/sqrt/div/overflow)."""

    def __init__(self, message: str, subtree=None):
        self.subtree = subtree
        where = f" in `{subtree.to_dsl()}`" if subtree is not None else ""
        super().__init__(f"{message}{where}")


class DataError(ConstraintUQError, ValueError):
    """Input file or dataset is malformed."""


class InfeasibleError(ConstraintUQError):
    """The hard-constraint set has no feasible point."""


class ConvergenceError(ConstraintUQError):
    """An iterative solver hit its iteration cap; ``best`` holds the best iterate."""

    def __init__(self, message: str, best=None):
        self.best = best
        super().__init__(message)


class NumericalError(ConstraintUQError, FloatingPointError):
    """Non-finite values appeared during training or evaluation."""
