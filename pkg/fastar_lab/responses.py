"""Response classes for FastAR Lab"""

from fastapi.responses import Response


class CSVResponse(Response):
    """CSV report response class"""

    media_type = "text/csv"
