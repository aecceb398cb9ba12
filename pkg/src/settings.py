import logging
import os
from functools import lru_cache
from typing import Optional

from pydantic import ValidationInfo, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class BaseConfig(BaseSettings):
    ENV_STATE: Optional[str] = None

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


class GlobalConfig(BaseConfig):
    LOG_LEVEL: str = "INFO"

    # Worker count for parallel chains, datasets and replicates
    WORKERS: int = max(1, min(4, os.cpu_count() or 1))
    # Kept draws between chain checkpoints when a checkpoint directory is set
    CHECKPOINT_EVERY_DRAWS: int = 100

    @field_validator("WORKERS", "CHECKPOINT_EVERY_DRAWS")
    @classmethod
    def check_positive(cls, v: int, info: ValidationInfo) -> int:
        if v < 1:
            raise ValueError(f"{info.field_name} must be >= 1, got {v}")
        return v

    OPEN_TELEMETRY_LOG_ENDPOINT: Optional[str] = None
    OPEN_TELEMETRY_TRACE_ENDPOINT: Optional[str] = None
    OPEN_TELEMETRY_AUTHORIZATION_TOKEN: Optional[str] = None


class DevConfig(GlobalConfig):
    LOG_LEVEL: str = "DEBUG"

    model_config = SettingsConfigDict(env_prefix="DEV_")


class TestConfig(GlobalConfig):
    WORKERS: int = 2

    model_config = SettingsConfigDict(env_prefix="TEST_")


class ProdConfig(GlobalConfig):
    LOG_LEVEL: Optional[str] = "WARNING"

    model_config = SettingsConfigDict(env_prefix="PROD_")


@lru_cache()
def get_config(env_state: Optional[str]):
    if not env_state:
        env_state = "dev"
    env_state = env_state.lower()
    configs = {"dev": DevConfig, "prod": ProdConfig, "test": TestConfig}
    if env_state not in configs:
        raise ValueError(
            f"Unknown ENV_STATE {env_state!r}. Possible values are: DEV, TEST, PROD"
        )
    return configs[env_state]()


config = get_config(BaseConfig().ENV_STATE)
