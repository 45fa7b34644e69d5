"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class VitSRError(Exception):
    exit_code = 1


class DimensionError(VitSRError, ValueError):
    """Tensor or image shapes are incompatible."""


class ConfigError(VitSRError, ValueError):
    """Inconsistent or invalid configuration."""


class ContractError(VitSRError, ValueError):
    """A precondition of an operation was violated."""


class DataError(VitSRError):
    exit_code = 2


class NumericalError(VitSRError):
    """Non-finite values during training, or a failed gradient check."""

    exit_code = 3
