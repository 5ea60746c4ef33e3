from functools import lru_cache
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Environment-level defaults; config files and flags override them."""
    model_config = SettingsConfigDict(env_prefix="ENTROPRUNE_", env_file=".env", extra="ignore")

    data_dir: Path = Path("data/cifar-10-batches-bin")
    output_dir: Path = Path("runs")
    seed: int = 0
    log_level: str = "INFO"


@lru_cache
def get_settings() -> Settings:
    return Settings()
