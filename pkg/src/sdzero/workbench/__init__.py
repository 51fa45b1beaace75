"""Run orchestration: one config file in, a reproducible run directory out."""

from .config import ConfigError, RunConfig, config_hash, load_config
from .manifest import ManifestError, manifest_verify

__all__ = [
    "ConfigError",
    "RunConfig",
    "config_hash",
    "load_config",
    "ManifestError",
    "manifest_verify",
]
