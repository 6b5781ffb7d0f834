"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3, numerical failures exit 4.
"""


class OrthocastError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(OrthocastError):
    """Invalid configuration value or inconsistent settings."""


class DataError(OrthocastError):
    """Malformed or invalid input data."""


class ParseError(DataError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)


class ValidationError(DataError):
    """A domain invariant is violated; message names the series/field."""


class NumericalError(OrthocastError):
    """A numerical procedure failed (divergence, singular system, ...)."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; carries the epoch index."""

    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class NoIdentificationError(NumericalError):
    """Effect fitting is degenerate: no treatment variation to learn from."""
