"""Exception types shared across the package.

The CLI maps each family onto an exit code, so new errors should subclass one
of these rather than raising bare built-ins.
"""


class DatError(Exception):
    """Base class for all package errors."""


class ConfigError(DatError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(DatError, ValueError):
    """Tensor dimensions do not fit the operation."""


class ContractError(DatError, ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(DatError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class LoadError(DatError, OSError):
    """A file on disk is missing, malformed or fails validation."""
