"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class CrossLayerError(Exception):
    exit_code = 1


class ConfigError(CrossLayerError, ValueError):
    exit_code = 2


class NumericalError(CrossLayerError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        # last good checkpoint, when the trainer had one
        self.checkpoint = checkpoint


class LeakageError(CrossLayerError):
    exit_code = 4


class CheckpointError(CrossLayerError):
    exit_code = 5


class BadMagicError(CheckpointError):
    exit_code = 5


class TruncatedCheckpointError(CheckpointError):
    exit_code = 6


class VersionMismatchError(CheckpointError):
    exit_code = 7


class InjectionShapeError(CrossLayerError, ValueError):
    exit_code = 8


class EmptySupervisionError(CrossLayerError, ValueError):
    exit_code = 9


class EmptyTokensError(CrossLayerError, ValueError):
    exit_code = 9


class NoDataError(CrossLayerError):
    exit_code = 10


class DeterminismError(CrossLayerError):
    exit_code = 11
