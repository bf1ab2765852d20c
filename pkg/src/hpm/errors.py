"""Exception types shared across the package."""


class HpmError(Exception):
    """Base class for all package errors."""


class ConfigError(HpmError):
    """Invalid configuration, topology or state-space description."""


class DataError(HpmError):
    """Invalid input data (images, manifests, out-of-domain arguments)."""


class ModelFormatError(HpmError):
    """Model file cannot be parsed or is inconsistent."""


class ConvergenceError(HpmError):
    """Solver failed to converge within its iteration budget."""

    def __init__(self, message, objective_trace=None):
        super().__init__(message)
        self.objective_trace = list(objective_trace or [])


class NotFoundError(HpmError):
    """No result satisfying the requested constraints (e.g. no detection in box)."""


class GuardError(HpmError):
    """Operation refused because a safety guard (size/cost bound) was exceeded."""
