"""
Configuration management for usp-ebm

Runtime settings come from a `.env` file and `USP_EBM_*` environment
variables; experiment configurations are JSON files validated by the
pydantic schemas in `usp_ebm.models`.
"""

import json
import os
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from ..models import ExperimentConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names every failing field path"""

    def __init__(self, message: str, field_paths: Optional[list] = None):
        super().__init__(message)
        self.field_paths = field_paths or []


@dataclass
class Settings:
    """Process-wide runtime settings"""

    output_dir: Optional[str] = None
    log_level: str = "INFO"
    grid_cache_size: int = 32
    chunk_size: int = 8192
    memory_warn_percent: float = 80.0
    trace_wall_time: bool = False

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Settings":
        return cls(**data)

    @classmethod
    def load(cls, env_file: Optional[str] = None) -> "Settings":
        """Load settings from the environment, after reading an optional .env file"""

        load_dotenv(env_file)
        defaults = cls()
        data = {
            "output_dir": os.getenv("USP_EBM_OUTPUT_DIR", defaults.output_dir),
            "log_level": os.getenv("USP_EBM_LOG_LEVEL", defaults.log_level).upper(),
            "grid_cache_size": int(
                os.getenv("USP_EBM_GRID_CACHE_SIZE", defaults.grid_cache_size)
            ),
            "chunk_size": int(os.getenv("USP_EBM_CHUNK_SIZE", defaults.chunk_size)),
            "memory_warn_percent": float(
                os.getenv("USP_EBM_MEMORY_WARN_PERCENT", defaults.memory_warn_percent)
            ),
            "trace_wall_time": os.getenv(
                "USP_EBM_TRACE_WALL_TIME", str(defaults.trace_wall_time)
            ).lower()
            == "true",
        }
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings.load()


def format_validation_error(error: ValidationError) -> ConfigError:
    """Turn a pydantic error into a ConfigError listing `field.path: message` lines"""
    lines = []
    paths = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"]) or "<root>"
        paths.append(path)
        lines.append(f"{path}: {item['msg']}")
    return ConfigError("Invalid configuration:\n  " + "\n  ".join(lines), paths)


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise format_validation_error(e) from e


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate an experiment config JSON file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}", ["<file>"])
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"Config file {path} is not valid JSON: {e}", ["<file>"]
        ) from e
    if not isinstance(data, dict):
        raise ConfigError("Config file must contain a JSON object", ["<root>"])
    return parse_experiment_config(data)
