class OttaError(Exception):
    """Base class for errors raised by ottakit."""


class ConfigurationError(OttaError, ValueError):
    pass


class DegenerateDataError(OttaError, ValueError):
    pass


class ContractViolation(OttaError, ValueError):
    pass


class ParseError(OttaError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class NumericFailure(OttaError, FloatingPointError):
    """A loss became non-finite; ``item`` is the offending batch position."""

    def __init__(self, message, item=None):
        self.item = item
        super().__init__(message)


class TrainingFailure(OttaError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class AdaptationFailure(OttaError, RuntimeError):
    def __init__(self, message, event_index=None, subject_id=None):
        self.event_index = event_index
        self.subject_id = subject_id
        super().__init__(message)


class UndefinedCorrelation(OttaError, ValueError):
    pass


class InsufficientData(OttaError, ValueError):
    pass


class CheckpointError(OttaError, ValueError):
    """A checkpoint file is unreadable, corrupt, or of an unknown version."""
