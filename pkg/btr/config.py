import os
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()

DATA_DIR = Path(__file__).resolve().parent / "data"


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="BTR_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Worker cap for the parallel offline compressor and per-pair encoding
    THREADS: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)

    LOG_LEVEL: str = "INFO"
    SHOW_PROGRESS: bool = True

    # Knob defaults (flags > --config file > these)
    SEED: int = 0
    OFFLINE_RATIO: float = Field(default=0.2, ge=0.0, le=0.5)
    RUNTIME_RATIO: float = Field(default=0.2, ge=0.0, le=0.5)
    MERGE_PERIOD: int = Field(default=3, ge=1)
    MERGE_RULE: Literal["alg2", "every-g"] = "alg2"

    STOPWORDS_PATH: Path = DATA_DIR / "stopwords.txt"
    TOY_CONFIG_PATH: Path = DATA_DIR / "toy.json"

    # App settings
    DEBUG: bool = False


settings = Settings()
