"""Stain-normalized descriptor extraction and boosted-tree classification
for H&E breast histology images."""

from .errors import ConfigError, HistopipeError
from .patches import CLASSES

__version__ = "0.1.0"

__all__ = ["CLASSES", "ConfigError", "HistopipeError", "__version__"]
