"""This module contains the process-level settings for the lab."""

from functools import lru_cache
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings read from the environment (prefix ``FASTAR_LAB_``) or a ``.env`` file."""

    model_config = SettingsConfigDict(env_prefix="FASTAR_LAB_", env_file=".env", extra="ignore")

    # Run output
    OUTPUT_ROOT: Path = Path("runs")
    DEFAULT_CONFIG: Optional[Path] = None
    LOG_LEVEL: str = "INFO"

    # Analytic API
    API_HOST: str = "127.0.0.1"
    API_PORT: int = 8000
    API_MAX_TOKENS: int = 4096


@lru_cache
def get_settings():
    """This function returns the settings obj for the lab."""
    return Settings()
