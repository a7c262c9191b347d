"""
Structured errors for identification runs.

Every failure raised by the package carries an error code, the context that
produced it (step index, parameter values, file row, ...) and a short list of
recovery suggestions, so that the CLI can report it and pick an exit code.

Usage:
    from particle_sysid.errors import DegeneracyError

    raise DegeneracyError("All particle weights are zero", step=17, n_particles=100)
"""

from enum import Enum
from typing import Any, Dict, List, Optional


class ErrorCode(Enum):
    """Standard error codes."""
    INPUT = "INPUT"
    DOMAIN = "DOMAIN"
    DEGENERACY = "DEGENERACY"
    CAPABILITY = "CAPABILITY"
    NUMERICAL = "NUMERICAL"
    CONFIG = "CONFIG"
    DATASET = "DATASET"
    FILE_IO = "FILE_IO"
    UNKNOWN = "UNKNOWN"


# Recovery strategy mapping for each error code
RECOVERY_STRATEGIES: Dict[ErrorCode, List[str]] = {
    ErrorCode.INPUT: [
        "Check array shapes against the model's state_dim and the dataset length",
        "Use at least two particles",
    ],
    ErrorCode.DOMAIN: [
        "Check that probabilities lie in [0, 1]",
        "Check that mean transition times exceed 2",
    ],
    ErrorCode.DEGENERACY: [
        "Increase the number of particles",
        "Check that the observations are compatible with the model at these parameters",
        "Use a twisted or locally optimal proposal",
    ],
    ErrorCode.CAPABILITY: [
        "Choose an algorithm the model supports (see `supports_feature`)",
        "Use plain particle Gibbs instead of PGAS for sample-only transitions",
    ],
    ErrorCode.NUMERICAL: [
        "Check that noise covariances are positive definite",
        "Rescale the data or the parameters",
    ],
    ErrorCode.CONFIG: [
        "Check the experiment config against the documented schema",
        "Run `particle-sysid validate` on the dataset first",
    ],
    ErrorCode.DATASET: [
        "Check the CSV header (`t,u,y`) and that numeric fields parse",
        "Leave the y field empty to mark a missing observation",
    ],
    ErrorCode.FILE_IO: [
        "Check file permissions and that the path exists",
        "Pass --force to overwrite an existing run directory",
    ],
    ErrorCode.UNKNOWN: [
        "Re-run with --verbose for a full log",
    ],
}


class SysIdError(Exception):
    """
    Base error with code, context and recovery guidance.

    Attributes:
        code: Error code classification
        message: Human-readable error description
        context: Additional contextual information (step, parameter, row, ...)
        recovery_suggestions: List of recovery steps to try
    """

    code: ErrorCode = ErrorCode.UNKNOWN

    def __init__(self, message: str, code: Optional[ErrorCode] = None, **context: Any):
        if code is not None:
            self.code = code
        self.message = message
        self.context: Dict[str, Any] = dict(context)
        self.recovery_suggestions: List[str] = list(
            RECOVERY_STRATEGIES.get(self.code, RECOVERY_STRATEGIES[ErrorCode.UNKNOWN])
        )
        super().__init__(message)

    def __str__(self) -> str:
        """Format error message with context."""
        if not self.context:
            return f"[{self.code.value}] {self.message}"
        details = ", ".join(f"{key}={_short(value)}" for key, value in self.context.items())
        return f"[{self.code.value}] {self.message} ({details})"

    def describe(self) -> str:
        """Multi-line description including recovery suggestions."""
        lines = [str(self)]
        if self.recovery_suggestions:
            lines.append("Recovery suggestions:")
            for i, suggestion in enumerate(self.recovery_suggestions, 1):
                lines.append(f"  {i}. {suggestion}")
        return "\n".join(lines)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary for JSON serialization."""
        return {
            "code": self.code.value,
            "message": self.message,
            "context": {key: _short(value) for key, value in self.context.items()},
            "recovery_suggestions": self.recovery_suggestions,
        }


class InputError(SysIdError, ValueError):
    """Raised when arguments violate an operation's preconditions."""
    code = ErrorCode.INPUT


class DomainError(SysIdError, ValueError):
    """Raised when a value lies outside the mathematical domain of an operation."""
    code = ErrorCode.DOMAIN


class DegeneracyError(SysIdError):
    """Raised when every particle weight is zero at some step."""
    code = ErrorCode.DEGENERACY

    @property
    def step(self) -> Optional[int]:
        return self.context.get("step")


class CapabilityError(SysIdError):
    """Raised when a model lacks a feature an algorithm needs."""
    code = ErrorCode.CAPABILITY


class NumericalError(SysIdError, ArithmeticError):
    """Raised on singular or indefinite matrices in exact Gaussian inference."""
    code = ErrorCode.NUMERICAL

    @property
    def step(self) -> Optional[int]:
        return self.context.get("step")


class ConfigError(SysIdError, ValueError):
    """Raised for invalid or incompatible experiment configurations."""
    code = ErrorCode.CONFIG


class DatasetError(SysIdError, ValueError):
    """Raised for malformed or inconsistent datasets."""
    code = ErrorCode.DATASET


class OutputExistsError(SysIdError, FileExistsError):
    """Raised when a run directory already holds results and overwriting was not forced."""
    code = ErrorCode.FILE_IO


def wrap_error(original_error: Exception, code: ErrorCode, message: str, **context: Any) -> SysIdError:
    """
    Wrap an existing exception into a SysIdError.

    Args:
        original_error: The original exception
        code: Error code classification
        message: Human-readable error description
        **context: Additional context as keyword arguments

    Returns:
        SysIdError: Wrapped error with recovery guidance

    Example:
        try:
            frame = pd.read_csv(path)
        except pd.errors.ParserError as e:
            raise wrap_error(e, ErrorCode.DATASET, "Cannot parse dataset", path=str(path)) from e
    """
    context["original_error_type"] = type(original_error).__name__
    context["original_error_message"] = str(original_error)
    error_class = _CLASS_BY_CODE.get(code, SysIdError)
    if error_class is SysIdError:
        return SysIdError(message, code=code, **context)
    return error_class(message, **context)


_CLASS_BY_CODE = {
    ErrorCode.INPUT: InputError,
    ErrorCode.DOMAIN: DomainError,
    ErrorCode.DEGENERACY: DegeneracyError,
    ErrorCode.CAPABILITY: CapabilityError,
    ErrorCode.NUMERICAL: NumericalError,
    ErrorCode.CONFIG: ConfigError,
    ErrorCode.DATASET: DatasetError,
}


def _short(value: Any) -> Any:
    text = str(value)
    if len(text) > 100:
        return text[:97] + "..."
    return value if isinstance(value, (int, float, bool, type(None))) else text
