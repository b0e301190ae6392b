from __future__ import annotations

import os

from dotenv import load_dotenv

load_dotenv()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    return int(raw)


class Settings:
    app_name: str = os.getenv("FAULTSIM_APP_NAME", "faultsim")
    app_env: str = os.getenv("FAULTSIM_ENV", "development")
    log_level: str = os.getenv("FAULTSIM_LOG_LEVEL", "INFO").upper()
    output_dir: str = os.getenv("FAULTSIM_OUTPUT_DIR", "./campaign-out")
    database_url: str = os.getenv("FAULTSIM_DATABASE_URL", "").strip()
    workers: int = _env_int("FAULTSIM_WORKERS", 1)
    max_rejections: int = _env_int("FAULTSIM_MAX_REJECTIONS", 3)

    def __init__(self) -> None:
        if self.workers < 1:
            raise RuntimeError("FAULTSIM_WORKERS must be >= 1")
        if self.max_rejections < 0:
            raise RuntimeError("FAULTSIM_MAX_REJECTIONS must be >= 0")


settings = Settings()
