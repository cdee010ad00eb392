"""Exception hierarchy shared by the library and the command-line front end."""

from __future__ import annotations

from typing import Any


class SupermarketError(Exception):
    """Base class for every error raised on purpose by this package."""


class ModelValidationError(SupermarketError, ValueError):
    """Input matrices, vectors or options violate a documented invariant."""


class StructuralError(ModelValidationError):
    """A generator that must be irreducible has more than one communicating class."""


class DomainError(SupermarketError, ValueError):
    """Arguments fall outside the mathematical domain (e.g. an unstable model)."""


class ResourceLimitError(SupermarketError, ValueError):
    """A configured size cap was hit before the computation could finish."""


class NumericalError(SupermarketError, ArithmeticError):
    """A numerical procedure failed on otherwise valid input."""


class IntegrationError(NumericalError):
    """The ODE integrator gave up; ``last_state`` holds the last accepted state."""

    def __init__(self, message: str, last_time: float, last_state: Any = None) -> None:
        super().__init__(message)
        self.last_time = last_time
        self.last_state = last_state


class SolverError(NumericalError):
    """The fixed-point solver could not meet its residual contract."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}
