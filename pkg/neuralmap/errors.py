"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class NeuralMapError(Exception):
    """Base class for all package errors."""


class DimensionError(NeuralMapError, ValueError):
    pass


class ArgumentError(NeuralMapError, ValueError):
    pass


class BoundsError(NeuralMapError, IndexError):
    pass


class NumericError(NeuralMapError, ArithmeticError):
    pass


class ConfigError(NeuralMapError, ValueError):
    pass


class EnvStateError(NeuralMapError, RuntimeError):
    pass


class CheckpointError(NeuralMapError, RuntimeError):
    """Unreadable container or a parameter manifest that does not match the model."""

    def __init__(self, message: str, offending: list[str] | None = None) -> None:
        super().__init__(message)
        self.offending = list(offending or [])


class AgentStateError(NeuralMapError, RuntimeError):
    """Carry of the wrong variant, or an empty memory buffer."""
