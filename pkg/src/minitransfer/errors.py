"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
anything else (InvariantError included) -> 4.
"""


class MiniTransferError(Exception):
    pass


class ConfigError(MiniTransferError, ValueError):
    """Invalid configuration. ``errors`` holds every violation found."""

    def __init__(self, message, errors=None):
        super().__init__(message)
        self.errors = list(errors) if errors else [message]


class DataError(MiniTransferError, ValueError):
    pass


class InvariantError(MiniTransferError, RuntimeError):
    pass


class DimensionError(MiniTransferError, ValueError):
    pass


class DomainError(MiniTransferError, ValueError):
    pass


class NumericError(MiniTransferError, FloatingPointError):
    pass


class LabelIndexError(MiniTransferError, IndexError):
    pass


class OptimizerStateError(InvariantError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CompatibilityError(ConfigError):
    pass


class RegistryError(ConfigError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class CapabilityError(MiniTransferError, TypeError):
    pass


class ConsistencyError(InvariantError):
    pass


class EvaluationError(MiniTransferError, ValueError):
    pass


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, DataError):
        return 3
    return 4
