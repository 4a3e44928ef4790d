"""Hierarchical text-guided 3D tumor segmentation at desk scale."""

from .errors import CaseIOError, ConfigError, IncompatibleError, NumericalError, TextCSPError

__version__ = "0.1.0"

__all__ = ["CaseIOError", "ConfigError", "IncompatibleError", "NumericalError", "TextCSPError", "__version__"]
