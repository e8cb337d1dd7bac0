"""Exception types shared across the package.

The CLI maps these onto exit codes: config/usage problems exit 1,
runtime/numerical failures exit 2.
"""


class ForgelocError(Exception):
    """Base class for all package errors."""


class DimensionError(ForgelocError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ForgelocError):
    """A configuration value violates its contract."""


class GraphError(ForgelocError):
    """Autodiff graph misuse (e.g. backward on a non-scalar)."""


class NumericsError(ForgelocError):
    """A numerical invariant was violated (NaN/Inf in a forward op)."""


class DataGenError(ForgelocError):
    """Synthetic sample generation could not satisfy its constraints."""


class TrainingError(ForgelocError):
    """The training loop hit an unrecoverable state."""


class CheckpointError(ForgelocError):
    """A checkpoint file is malformed or does not match the model."""
