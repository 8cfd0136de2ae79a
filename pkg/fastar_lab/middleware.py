"""Middleware for the FastAR Lab API."""

from urllib.parse import urlencode

from starlette.middleware.base import BaseHTTPMiddleware
from starlette.requests import Request
from starlette.types import ASGIApp


def normalize_param_name(name: str) -> str:
    """``AR-Iters`` and ``ar_iters`` name the same parameter."""
    return name.strip().lower().replace("-", "_")


class NormalizeQueryParamsMiddleware(BaseHTTPMiddleware):
    """Middleware to make query parameter names case-insensitive and dash/underscore agnostic.

    Route parameters are declared in snake_case; every incoming name is
    lowercased and has dashes replaced before routing.
    """

    def __init__(self, app: ASGIApp):
        super().__init__(app)

    async def dispatch(self, request: Request, call_next):
        normalized = [(normalize_param_name(key), value) for key, value in request.query_params.multi_items()]

        # Replace the scope's query string with the normalized version
        request.scope["query_string"] = urlencode(normalized, doseq=True).encode("utf-8")

        return await call_next(request)
