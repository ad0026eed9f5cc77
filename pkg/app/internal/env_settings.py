import os

from pydantic import BaseModel, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class ApplicationSettings(BaseModel):
    log_level: str = "INFO"

    threads: int = 0
    """Worker threads used for batch scoring, sweeps and permutations. 0 uses the CPU count."""

    @field_validator("threads")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("threads must be >= 0")
        return value

    def get_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        return os.cpu_count() or 1


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="SIQA_",
        env_nested_delimiter="__",
        nested_model_default_partial_update=True,
        env_file=(".env.local", ".env"),
    )

    app: ApplicationSettings = ApplicationSettings()
