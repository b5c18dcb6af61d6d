"""Shared exception types.

The CLI maps ConfigError to exit code 1 and everything else to 2, so
raising the right class here is part of the interface contract.
"""


class LocaError(Exception):
    pass


class ConfigError(LocaError):
    """Invalid configuration value, file, or flag."""


class ShapeError(LocaError):
    """Tensor shapes incompatible with the requested operation."""


class ParameterError(LocaError):
    """Out-of-range numeric argument (temperature, eps, ratio, ...)."""


class TapeError(LocaError):
    """Gradient tape misuse: double backward, loss not on tape, ..."""


class ContractError(LocaError):
    """A caller-side precondition was violated at runtime."""


class DegenerateInputError(LocaError):
    """Numerically degenerate input (all-zero row, empty matrix, ...)."""


class CheckpointError(LocaError):
    """Malformed checkpoint file or config-hash mismatch."""
