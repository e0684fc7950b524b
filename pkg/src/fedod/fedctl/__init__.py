"""Command-line front end and experiment orchestration."""

from .presets import ConfigError, ExperimentConfig, PRESETS, resolve_config

__all__ = ["ConfigError", "ExperimentConfig", "PRESETS", "resolve_config"]
