"""
Utility modules for usp-ebm
"""

from .config import ConfigError, Settings, get_settings, load_experiment_config
from .rng import stream, streams

__all__ = [
    "ConfigError",
    "Settings",
    "get_settings",
    "load_experiment_config",
    "stream",
    "streams",
]
