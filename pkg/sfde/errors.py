"""
Exception hierarchy for the toolkit.

Every error carries a short `kind` string, used in the machine-readable
error JSON of the command line, and an `exit_code`:
1 for bad input (validation), 2 for numerical failures.
"""


class SfdeError(Exception):
    kind: str = "error"
    exit_code: int = 2

    def to_json_dict(self) -> dict[str, str | int]:
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


# --- Validation errors (exit code 1) ---


class ValidationError(SfdeError):
    kind = "validation"
    exit_code = 1


class AlignmentError(ValidationError):
    kind = "alignment"


class ShapeError(ValidationError):
    kind = "shape"


class RangeError(ValidationError):
    kind = "range"


class PreconditionError(ValidationError):
    kind = "precondition"


class ConfigError(ValidationError):
    kind = "config"


class ExprSyntaxError(ValidationError):
    kind = "syntax"

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownNameError(ValidationError):
    kind = "unknown_name"

    def __init__(self, message: str, suggestion: str | None = None):
        if suggestion:
            message = f"{message} (did you mean '{suggestion}'?)"
        super().__init__(message)
        self.suggestion = suggestion


# --- Numerical errors (exit code 2) ---


class NumericalError(SfdeError):
    kind = "numerical"
    exit_code = 2


class EvaluationError(NumericalError):
    kind = "evaluation"


class IntegrationOverflowError(NumericalError):
    kind = "overflow"

    def __init__(self, message: str, node_time: float):
        super().__init__(f"{message} (first bad node t={node_time!r})")
        self.node_time = node_time


class RootOnContourError(NumericalError):
    kind = "root_on_contour"


class ConvergenceError(NumericalError):
    kind = "convergence"


class UnstableSystemError(NumericalError):
    kind = "unstable"


class CertificationError(NumericalError):
    kind = "certification"


class StatisticsError(NumericalError):
    kind = "statistics"


# --- Warnings ---


class LowConfidenceWarning(UserWarning):
    """An estimate was computed on a horizon too short to trust fully."""


class LipschitzWarning(UserWarning):
    """A nonlinearity uses an operation with no global Lipschitz bound."""
