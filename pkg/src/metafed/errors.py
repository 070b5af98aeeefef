"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions or model architectures do not line up."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ConfigError(ValueError):
    """Invalid hyperparameters, loss settings or experiment configuration."""


class ParseError(ValueError):
    """Malformed input file. ``lineno`` is 1-based, or None for whole-file problems."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class PartitionError(RuntimeError):
    """A federated split could not satisfy its minimum-size constraints."""


class ProtocolError(RuntimeError):
    """A training protocol hit a state it cannot proceed from (e.g. empty validation set)."""
