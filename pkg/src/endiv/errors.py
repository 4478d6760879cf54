"""Exception hierarchy with CLI exit codes attached."""

from __future__ import annotations


class EndivError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(EndivError):
    """Invalid parameter or configuration value."""

    exit_code = 2


class EstimationError(EndivError):
    """A fit or inference step failed."""

    exit_code = 3


class SolverError(EstimationError):
    """The convex solver did not return a usable solution."""


class WeakInstrumentError(EstimationError):
    """The constructed instrument for a coordinate is numerically irrelevant."""

    def __init__(self, j: int, omega: float, threshold: float):
        self.j = j
        self.omega = omega
        self.threshold = threshold
        super().__init__(
            f"weak constructed instrument for coordinate j={j}: "
            f"|omega_hat|={abs(omega):.3e} <= threshold {threshold:.3e}"
        )


class BudgetError(EstimationError):
    """An enumeration exceeded its hard budget."""


class DataError(EndivError):
    """Problem with an input data artifact."""

    exit_code = 4


class SchemaError(DataError):
    """Input file header does not match the expected column schema."""


class ParseError(DataError):
    """A cell could not be parsed as a finite number."""


class IdentificationError(DataError):
    """Fewer instruments than endogenous regressors (K < p)."""


class ValidationError(DataError):
    """Dataset invariants are violated."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid dataset: " + "; ".join(violations))
