"""
Process-level settings for dynfusion, read from the environment and `.env`
"""
import os
from typing import Literal

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Settings(BaseSettings):
    fusion_threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    default_bitdepth: Literal[8, 16] = 16
    psnr_cap: float = 99.0
    verbose: bool = True

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()


def say(message: str) -> None:
    """Print a progress line unless output is silenced"""
    if settings.verbose:
        print(message)
