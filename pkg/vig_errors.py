"""
Error types raised across the ViG library.

Each error carries the exit code the command-line front door returns for it:
1 usage, 2 config, 3 runtime.
"""

from typing import Optional


class ViGError(Exception):
    """Base class for every error the library raises on purpose."""

    exit_code = 3


class UsageError(ViGError):
    exit_code = 1


class ConfigError(ViGError):
    """Invalid configuration; `field` names the offending key path."""

    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class DimensionError(ViGError, ValueError):
    pass


class DegenerateBatchError(ViGError):
    pass


class EmptyNeighborhoodError(ViGError):
    pass


class InsufficientNodesError(ViGError):
    pass


class HeadSplitError(ViGError):
    pass


class ContractError(ViGError):
    pass


class LifecycleError(ViGError):
    pass


class NonFiniteError(ViGError, FloatingPointError):
    pass


class DivergenceError(ViGError):
    pass


class TargetIndexError(ViGError, IndexError):
    pass


class LayerIndexError(ViGError, IndexError):
    pass


class DatasetFormatError(ViGError):
    pass
