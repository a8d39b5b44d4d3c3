"""
Configuration settings for the xrpipe runtime
"""

from functools import lru_cache
from typing import Literal

from pydantic import BaseModel, ConfigDict
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings (environment-bound)"""

    # Log verbosity is the only parameter read from the environment;
    # everything else is passed as command-line flags.
    XRPIPE_LOG: Literal["error", "info", "debug"] = "info"

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


@lru_cache
def get_settings() -> Settings:
    """
    Read settings from the environment on first use

    Raises:
        pydantic.ValidationError: XRPIPE_LOG holds an unknown level
    """
    return Settings()


class RuntimeDefaults(BaseModel):
    """Runtime tunables (not environment-bound)"""

    model_config = ConfigDict(frozen=True)

    # Channel Settings
    CHANNEL_CAPACITY: int = 8
    OVERFLOW_POLICY: str = "BLOCK"

    # Shutdown Settings
    DRAIN_WINDOW_SECONDS: float = 2.0
    POLL_INTERVAL_SECONDS: float = 0.05

    # Remote Link Settings
    CONNECT_ATTEMPTS: int = 10
    CONNECT_RETRY_SECONDS: float = 0.1
    ACCEPT_TIMEOUT_SECONDS: float = 30.0
    HANDSHAKE_TIMEOUT_SECONDS: float = 10.0
    MAX_PAYLOAD_BYTES: int = 256 * 1024 * 1024

    # Benchmark Settings
    BENCH_WARMUP_FRAMES: int = 50
    BENCH_DEFAULT_FRAMES: int = 1000
    BENCH_DEFAULT_ADDRESS: str = "127.0.0.1:7100"

    # Sink Settings
    SINK_RECORD_CAP: int = 1_000_000


defaults = RuntimeDefaults()
