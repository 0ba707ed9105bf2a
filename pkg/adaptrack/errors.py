"""
Custom exceptions for adaptrack
"""

from typing import Any, Optional


class AdaptrackError(Exception):
    """Base exception for all adaptrack errors"""

    pass


class ValidationError(AdaptrackError):
    """Input value outside its allowed range"""

    pass


class DimensionError(ValidationError):
    """Shape or extent mismatch"""

    pass


class ConfigurationError(AdaptrackError):
    """Invalid or missing configuration"""

    pass


class NumericalError(AdaptrackError):
    """A NaN or Inf appeared where only finite values are allowed"""

    def __init__(self, where: str, diagnostics: Optional[Any] = None):
        self.where = where
        self.diagnostics = diagnostics
        message = f"Non-finite value in {where}"
        if diagnostics is not None:
            message += f" ({diagnostics})"
        super().__init__(message)


class CheckpointError(AdaptrackError):
    """Checkpoint could not be read or does not match the running config"""

    def __init__(self, message: str, path: str):
        self.message = message
        self.path = path
        super().__init__(f"Checkpoint {path}: {message}")


class SinkhornConvergenceWarning(UserWarning):
    """Sinkhorn stopped at max_iter before reaching its tolerance"""

    pass
