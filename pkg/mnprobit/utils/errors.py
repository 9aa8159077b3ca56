"""Exception hierarchy for mnprobit.

Every failure raised by the library belongs to one hierarchy so the CLI can map
it to a distinguished exit status and a helpful recovery hint.
"""

from enum import Enum
from typing import Any, Dict, Optional, Tuple, Type

import numpy as np


class ErrorCategory(Enum):
    """Categories of mnprobit errors for better classification."""
    VALIDATION = "validation"
    CONFIGURATION = "configuration"
    NUMERIC = "numeric"
    SINGULARITY = "singularity"
    CAPACITY = "capacity"
    INFEASIBLE = "infeasible"
    CONVERGENCE = "convergence"
    IO = "io"


class MnprobitError(Exception):
    """Base exception for all mnprobit errors with enhanced context."""

    default_hint: Optional[str] = None
    default_category: Optional[ErrorCategory] = None

    def __init__(
        self,
        message: str,
        category: Optional[ErrorCategory] = None,
        recovery_hint: Optional[str] = None,
        context: Optional[Dict[str, Any]] = None,
        cause: Optional[Exception] = None,
    ) -> None:
        """Initialize an mnprobit error.

        Args:
            message: Primary error message
            category: Error category for classification
            recovery_hint: Suggestion for resolving the error
            context: Additional context information (module, matrix name, line, ...)
            cause: Original exception that caused this error
        """
        super().__init__(message)
        self.message = message
        self.category = category or self.default_category
        self.recovery_hint = recovery_hint or self.default_hint
        self.context = context or {}
        self.cause = cause

    def __str__(self) -> str:
        parts = [self.message]

        if self.recovery_hint:
            parts.append(f"Suggestion: {self.recovery_hint}")

        if self.context:
            context_str = ", ".join(f"{k}={v}" for k, v in self.context.items())
            parts.append(f"Context: {context_str}")

        return "\n".join(parts)

    def to_dict(self) -> Dict[str, Any]:
        """Convert error to dictionary for serialization."""
        return {
            "type": self.__class__.__name__,
            "message": self.message,
            "category": self.category.value if self.category else None,
            "recovery_hint": self.recovery_hint,
            "context": {k: str(v) for k, v in self.context.items()},
            "cause": str(self.cause) if self.cause else None,
        }


class MnprobitValidationError(MnprobitError):
    """Invalid arguments or input data (out-of-range labels, bad shapes, malformed rows)."""

    default_category = ErrorCategory.VALIDATION
    default_hint = (
        "Check input dimensions and values against the documented format. "
        "Use --help for parameter documentation."
    )


class MnprobitConfigError(MnprobitError):
    """Invalid run configuration or covariance source."""

    default_category = ErrorCategory.CONFIGURATION
    default_hint = (
        "Check the configuration file for misspelled keys and out-of-range values. "
        "Unknown keys are rejected on purpose."
    )


class MnprobitNumericError(MnprobitError):
    """A numerical routine failed (CDF evaluation, factorization, non-finite output)."""

    default_category = ErrorCategory.NUMERIC
    default_hint = "Rescale covariates or reduce the prior variance nu2 and retry."


class MnprobitSingularityError(MnprobitNumericError):
    """A matrix could not be factorized even after the maximal jitter."""

    default_category = ErrorCategory.SINGULARITY
    default_hint = (
        "The matrix is numerically singular. Check Sigma for positive definiteness "
        "or raise max_jitter."
    )


class MnprobitCapacityError(MnprobitNumericError):
    """A dimension exceeds the configured cap of an algorithm."""

    default_category = ErrorCategory.CAPACITY
    default_hint = "Use the Monte Carlo variant (method='mc') or the variational method instead."


class MnprobitInfeasibleMethodError(MnprobitNumericError):
    """The requested sampling method cannot succeed in reasonable time."""

    default_category = ErrorCategory.INFEASIBLE
    default_hint = "Use trunc_method='auto' or 'gibbs' for regions with tiny probability."


class MnprobitConvergenceError(MnprobitError):
    """A variational state did not converge and was used as if it had."""

    default_category = ErrorCategory.CONVERGENCE
    default_hint = "Increase max_sweeps, loosen eps, or pass allow_unconverged=True explicitly."


class MnprobitIOError(MnprobitError):
    """Reading or writing files failed."""

    default_category = ErrorCategory.IO
    default_hint = "Check that the path exists and is writable."


# First match wins; order from specific to general.
_ERROR_MAPPING: Tuple[Tuple[Type[BaseException], Type[MnprobitError]], ...] = (
    (np.linalg.LinAlgError, MnprobitSingularityError),
    (FloatingPointError, MnprobitNumericError),
    (OSError, MnprobitIOError),
    (ValueError, MnprobitValidationError),
)


def handle_exception(
    exc: Exception,
    context: Optional[Dict[str, Any]] = None,
    operation: Optional[str] = None,
) -> MnprobitError:
    """Convert generic exceptions to mnprobit errors with context.

    Args:
        exc: Original exception
        context: Additional context information
        operation: Description of operation that failed

    Returns:
        Appropriate mnprobit error with enhanced information
    """
    if isinstance(exc, MnprobitError):
        if context:
            exc.context = {**context, **exc.context}
        return exc

    error_class: Type[MnprobitError] = MnprobitNumericError
    for source, target in _ERROR_MAPPING:
        if isinstance(exc, source):
            error_class = target
            break

    message = f"{operation}: {exc}" if operation else str(exc)

    return error_class(
        message=message,
        context=context,
        cause=exc,
    )
