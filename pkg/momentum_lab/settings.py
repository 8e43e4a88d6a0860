"""momentum_lab/settings.py

Environment-driven defaults.  Every field can be overridden with a
``MOMENTUM_LAB_<NAME>`` variable, e.g.::

    MOMENTUM_LAB_THREADS=8 python -m momentum_lab simulate sweep ...
"""
from __future__ import annotations

from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="MOMENTUM_LAB_", extra="ignore")

    threads: int = Field(default=1, ge=1)
    log_level: str = "WARNING"
    # cross-check global_rate against the eigenvalue oracle on interior λ
    debug_checks: bool = False


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings()
