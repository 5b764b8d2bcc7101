"""
Application configuration.

Process-level settings come from environment variables via pydantic-settings;
experiment configuration comes from a single YAML file validated by the
schemas in ``app.models.schemas``.
"""

from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.exceptions import ConfigurationError
from app.models.schemas import ExperimentConfig


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    app_name: str = "cardioseg"
    app_version: str = "1.0.0"
    debug: bool = False
    log_level: str = "INFO"

    # Data root for directory datasets; recorded in provenance when used
    data_root: Optional[Path] = None
    output_dir: Optional[Path] = None
    jobs: Optional[int] = None
    deterministic: Optional[bool] = None

    model_config = SettingsConfigDict(
        env_prefix="CARDIOSEG_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Uses lru_cache so the environment is only read once per process.
    """
    return Settings()


def _format_location(loc: tuple) -> str:
    return ".".join(str(part) for part in loc)


def parse_experiment_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw mapping into an ExperimentConfig.

    Raises:
        ConfigurationError: Naming the first unknown or invalid key.
    """
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = _format_location(first["loc"])
        if first["type"] == "extra_forbidden":
            raise ConfigurationError(f"Unknown configuration key '{location}'")
        raise ConfigurationError(f"Invalid value for '{location}': {first['msg']}")
    for pipeline in config.pipelines:
        pipeline.check()
    return config


def load_experiment_config(path: Optional[Path]) -> ExperimentConfig:
    """
    Load the experiment configuration file.

    Args:
        path: YAML file path; ``None`` yields the all-defaults configuration.

    Returns:
        Validated ExperimentConfig.

    Raises:
        ConfigurationError: On missing file, YAML syntax errors (with line and
            column) or schema violations.
    """
    if path is None:
        return ExperimentConfig()

    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")

    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigurationError(f"Config parse error in {path} at {where}: {e.problem}")
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config parse error in {path}: {e}")

    if not isinstance(raw, dict):
        raise ConfigurationError(f"Config file {path} must contain a mapping at top level")

    return parse_experiment_config(raw)


def dump_experiment_config(config: ExperimentConfig) -> str:
    """Render a configuration as YAML (used for provenance and dry-run plans)."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
