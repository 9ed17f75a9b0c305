"""Common exception base for the package."""


class HistopipeError(Exception):
    """Base class for all errors raised by histopipe."""


class ConfigError(HistopipeError):
    """Invalid or unparseable pipeline configuration."""
