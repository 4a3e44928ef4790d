"""Exception hierarchy shared across the package.

The CLI maps these onto stable exit codes (see ``textcsp.cli``).
"""


class TextCSPError(Exception):
    """Base class for all package errors."""


class ConfigError(TextCSPError, ValueError):
    """Invalid or infeasible configuration.

    ``field`` names the offending configuration key when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class CaseIOError(TextCSPError, OSError):
    """A case or dataset member file is missing, truncated or inconsistent."""


class NumericalError(TextCSPError, FloatingPointError):
    """Non-finite loss, logits or gradients encountered during training."""


class IncompatibleError(TextCSPError):
    """Checkpoint and dataset (or config) disagree on dimensions."""
