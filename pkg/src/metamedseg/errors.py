"""Exception hierarchy shared by every stage of the pipeline."""


class MetaSegError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigurationError(MetaSegError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    pass


class IncompatibleCheckpointError(ConfigurationError):
    pass


class DataError(MetaSegError):
    exit_code = 3


class InsufficientDataError(DataError):
    pass


class DegenerateVolumeError(DataError):
    pass


class FormatError(DataError):
    pass


class ProtocolError(DataError):
    pass


class NumericError(MetaSegError, ArithmeticError):
    exit_code = 4


class TrainingDivergedError(NumericError):
    def __init__(self, message, task_id=None, epoch=None):
        context = []
        if epoch is not None:
            context.append(f"epoch={epoch}")
        if task_id is not None:
            context.append(f"task={task_id}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.task_id = task_id
        self.epoch = epoch
