"""Main application for the FastAR Lab analytic API."""

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from starlette.exceptions import HTTPException

from fastar_lab import __version__
from fastar_lab.exceptions import (
    FastarLabError,
    general_exception_handler,
    http_exception_handler,
    lab_exception_handler,
    validation_exception_handler,
)
from fastar_lab.middleware import NormalizeQueryParamsMiddleware
from fastar_lab.router.lab_router import lab_router

app = FastAPI(
    title="FastAR Lab API",
    description=(
        "Analytic inference costs, AR schedules and exact Gaussian conditionals "
        "for few-step autoregressive generation."
    ),
    version=__version__,
)

# Middleware to normalise query parameter names (case, dashes)
app.add_middleware(NormalizeQueryParamsMiddleware)

# Exception handlers
app.add_exception_handler(Exception, general_exception_handler)
app.add_exception_handler(HTTPException, http_exception_handler)
app.add_exception_handler(RequestValidationError, validation_exception_handler)
app.add_exception_handler(FastarLabError, lab_exception_handler)

app.include_router(lab_router)
