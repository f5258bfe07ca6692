"""Exception hierarchy shared across the solver stack."""


class CircflowError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(CircflowError):
    """Malformed instance text; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(CircflowError):
    """Instance violates a structural precondition (demands, connectivity, ...)."""


class UnsupportedCapacityError(ValidationError):
    """Arc capacities other than [0, 1] are not representable here."""


class SolverFailure(CircflowError):
    """A linear or convex subproblem failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractViolation(CircflowError):
    """A caller handed an operation a state outside its contract."""


class StepInfeasible(CircflowError):
    """A progress step violated one of its measured guarantees; caller may shrink delta."""


class NumericalFailure(CircflowError):
    """An iteration stalled or an invariant failed for numerical reasons."""


class ConfigurationError(CircflowError):
    """Requested parameters are mutually inconsistent for this instance size."""
