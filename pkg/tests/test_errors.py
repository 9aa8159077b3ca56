import numpy as np
import pytest

from mnprobit.cli import ExitStatus, exit_status_for
from mnprobit.utils.errors import (
    ErrorCategory,
    MnprobitCapacityError,
    MnprobitConfigError,
    MnprobitConvergenceError,
    MnprobitIOError,
    MnprobitNumericError,
    MnprobitSingularityError,
    MnprobitValidationError,
    handle_exception,
)


@pytest.mark.parametrize(
    "exc, expected",
    [
        (np.linalg.LinAlgError("not positive definite"), MnprobitSingularityError),
        (FileNotFoundError("gone"), MnprobitIOError),
        (IsADirectoryError("dir"), MnprobitIOError),
        (OSError("disk full"), MnprobitIOError),
        (ValueError("bad"), MnprobitValidationError),
        (ZeroDivisionError("x"), MnprobitNumericError),
    ],
)
def test_handle_exception_mapping(exc, expected):
    error = handle_exception(exc, context={"module": "cli"}, operation="reading")
    assert type(error) is expected
    assert error.cause is exc
    assert error.message.startswith("reading: ")
    assert error.context["module"] == "cli"


def test_handle_exception_keeps_own_context():
    original = MnprobitSingularityError("Lambda", context={"module": "model_core"})
    error = handle_exception(original, context={"module": "cli", "row": 3})
    assert error is original
    assert error.context == {"module": "model_core", "row": 3}


def test_defaults_and_serialization():
    error = MnprobitCapacityError("h=12 above cap", context={"h": 12})
    assert error.category is ErrorCategory.CAPACITY
    assert isinstance(error, MnprobitNumericError)
    assert "Suggestion:" in str(error)
    assert "h=12" in str(error)
    payload = error.to_dict()
    assert payload["type"] == "MnprobitCapacityError"
    assert payload["category"] == "capacity"
    assert payload["context"] == {"h": "12"}


@pytest.mark.parametrize(
    "error, status",
    [
        (MnprobitValidationError("x"), ExitStatus.VALIDATION),
        (MnprobitConfigError("x"), ExitStatus.VALIDATION),
        (MnprobitSingularityError("x"), ExitStatus.NUMERIC),
        (MnprobitCapacityError("x"), ExitStatus.NUMERIC),
        (MnprobitConvergenceError("x"), ExitStatus.NOT_CONVERGED),
        (MnprobitIOError("x"), ExitStatus.IO),
        (RuntimeError("x"), ExitStatus.UNEXPECTED),
    ],
)
def test_exit_status_mapping(error, status):
    assert exit_status_for(error) == status
