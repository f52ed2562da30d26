"""Exception types shared across the package."""


class StackRaceError(Exception):
    """Base class for all package errors."""


class InvalidPoint(StackRaceError):
    """Point is too far from an MCP solution to classify its indices."""


class NonFinite(StackRaceError):
    """A model callback returned NaN or infinity."""


class DimensionMismatch(StackRaceError):
    pass


class TooManyPieces(StackRaceError):
    """Degenerate branching would exceed the configured piece cap."""


class DegenerateCircle(StackRaceError):
    """Three checkpoints are (numerically) collinear."""


class InfeasibleStart(StackRaceError):
    pass


class SamplingExhausted(StackRaceError):
    pass


class ConfigError(StackRaceError):
    """Malformed configuration or scenario input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
