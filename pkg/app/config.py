"""Process-wide settings read from the environment (and an optional .env file)."""

import os
import logging
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

_ENV_PREFIX = "KD_"


class StrictModel(BaseModel):
    """Base for every structured config: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class Settings(StrictModel):
    """
    Defaults that apply to every run of the process.

    Attributes:
        log_level: Root logging level used by the CLI.
        output_dir: Default directory for checkpoints, reports and tables.
        jobs: Default number of parallel grid cells.
        batch_size: Default mini-batch size when a config omits it.
        epochs: Default number of epochs when a config omits it.
        record_timing: Write wall-clock timing sidecars next to reports.
    """

    log_level: str = "INFO"
    output_dir: Path = Path("runs")
    jobs: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(30, ge=1)
    record_timing: bool = False


def _from_environment() -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for name in Settings.model_fields:
        raw = os.environ.get(_ENV_PREFIX + name.upper())
        if raw is not None and raw != "":
            values[name] = raw
    return values


def load_settings() -> Settings:
    """
    Build Settings from KD_* environment variables.

    Returns:
        Settings: Validated settings, defaults filled in.

    Raises:
        ConfigError: If a variable holds a value of the wrong type.
    """
    try:
        return Settings(**_from_environment())
    except ValidationError as e:
        raise ConfigError(f"Invalid KD_* environment configuration: {e}") from e


def validate_environment(settings: Settings) -> bool:
    """
    Check that the configured output directory can be used.

    Returns:
        bool: True if the directory exists or could be created, False otherwise.
    """
    try:
        settings.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        logger.error(f"Output directory {settings.output_dir} is not usable: {e}")
        return False
    return True
