"""Exception hierarchy shared across the package."""


class PMGAFTError(Exception):
    pass


class ValidationError(PMGAFTError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class InputShapeError(ShapeError):
    pass


class ConfigError(ValidationError):
    pass


class UnsupportedTapError(PMGAFTError):
    """The encoder has no layer in front of its final projection."""


class AttackFailureError(PMGAFTError):
    def __init__(self, message, batch_index=None):
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")
        self.batch_index = batch_index


class ContractViolation(PMGAFTError):
    pass


class AliasingError(PMGAFTError):
    pass


class TrainingAbort(PMGAFTError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class FormatError(ValidationError):
    pass


class CorruptionError(FormatError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} at byte offset {offset}")
        self.offset = offset


class DegenerateConfigWarning(RuntimeWarning):
    pass
