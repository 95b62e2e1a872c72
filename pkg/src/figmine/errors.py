"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class FigmineError(Exception):
    """Base class for every error raised by figmine."""


class ConfigError(FigmineError):
    """Invalid or incomplete pipeline configuration."""
