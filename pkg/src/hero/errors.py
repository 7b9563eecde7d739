"""Exception hierarchy shared by every module."""


class HeroError(Exception):
    """Base class for all package errors."""


class DimensionError(HeroError, ValueError):
    """Input shape does not match what a network or buffer expects."""


class NonFiniteError(HeroError, FloatingPointError):
    """A loss, gradient or network output contained NaN or inf."""


class TapeError(HeroError, RuntimeError):
    """A gradient tape was used in an invalid state (e.g. reused)."""


class ConfigError(HeroError, ValueError):
    """Configuration is invalid or a prerequisite artifact is missing."""


class InvalidActionError(HeroError, ValueError):
    """An environment command was rejected."""


class EmptyBufferError(HeroError, LookupError):
    """Sampling was requested from an empty replay buffer."""


class MalformedLogError(HeroError, ValueError):
    """A trajectory or training log could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
