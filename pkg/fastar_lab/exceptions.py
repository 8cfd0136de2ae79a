"""Exceptions for FastAR Lab."""

from fastapi.responses import Response

from fastar_lab.responses import CSVResponse

# A boilerplate CSV error document
CSV_ERROR_DOCUMENT = "status,error\n{status},{error}\n"


class FastarLabError(Exception):
    """Base class for every error raised by the lab."""

    status_code = 500


class ShapeMismatchError(FastarLabError):
    """An operation received operands of incompatible shapes."""

    status_code = 400

    def __init__(self, op: str, message: str, node_id: int | None = None):
        self.op = op
        self.node_id = node_id
        where = f"node {node_id} ({op})" if node_id is not None else op
        super().__init__(f"Shape mismatch at {where}: {message}")


class NonFiniteError(FastarLabError):
    """A forward value, gradient or loss contains NaN or Inf."""

    def __init__(self, what: str, node_id: int | None = None, step: int | None = None, batch_index: int | None = None):
        self.what = what
        self.node_id = node_id
        self.step = step
        self.batch_index = batch_index
        parts = [f"Non-finite value in {what}"]
        if node_id is not None:
            parts.append(f"node {node_id}")
        if step is not None:
            parts.append(f"step {step}")
        if batch_index is not None:
            parts.append(f"batch index {batch_index}")
        super().__init__(", ".join(parts))


class NonScalarObjectiveError(FastarLabError):
    """Backward was requested for an objective with more than one element."""

    def __init__(self, shape: tuple[int, ...]):
        super().__init__(f"Objective must be a scalar, got shape {shape}")


class DomainError(FastarLabError):
    """An argument lies outside the domain an operation accepts."""

    status_code = 400


class CacheLengthError(FastarLabError):
    """A KV cache was used at a sequence length it does not hold."""

    status_code = 400


class SingularCovarianceError(FastarLabError):
    """A covariance block could not be factorised."""

    status_code = 400


class ConfigError(FastarLabError):
    """A run configuration failed to parse or validate."""

    status_code = 400


class CheckpointError(FastarLabError):
    """A checkpoint is missing, malformed or of an unknown format version."""


class RunDirectoryLockedError(FastarLabError):
    """Another process owns the run directory."""


class GenerationIncompleteError(FastarLabError):
    """Generation finished its iterations with pending positions left."""


# Error handlers


def csv_error_response(message: str, status_code: int) -> Response:
    """Create a CSV error document with the status code and a one-line message."""
    message = message.replace("\n", " ").replace(",", ";").strip()
    return CSVResponse(content=CSV_ERROR_DOCUMENT.format(status=status_code, error=message), status_code=status_code)


async def lab_exception_handler(request, exc: FastarLabError) -> CSVResponse:  # pylint: disable=unused-argument
    """Handler for errors raised by the lab itself."""

    return csv_error_response(str(exc), exc.status_code)


async def general_exception_handler(request, exc) -> CSVResponse:  # pylint: disable=unused-argument
    """
    General exception handler for unhandled exceptions.
    """

    # Throw a generic error message
    error_str = "An unexpected error occurred. Please try again later."
    return csv_error_response(error_str, 500)


async def http_exception_handler(request, exc):
    """StarletteHTTPException handler"""

    error_str = exc.detail.replace("\n", " ").strip()
    return csv_error_response(error_str, exc.status_code)


async def validation_exception_handler(request, exc) -> CSVResponse:  # pylint: disable=unused-argument
    """Exception handler for request validation errors."""

    errors = exc.errors()
    error_str = " ".join([f"Error in {'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in errors])
    return csv_error_response(error_str, 422)
