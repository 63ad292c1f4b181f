"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination."""


class CorpusParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DomainError(ValueError):
    """Argument outside the domain an operation is defined on."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, index=None, where=None):
        self.index = index
        self.where = where
        super().__init__(message)


class SingularLayerError(NumericError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the current setup."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, epoch=None, last_good_state=None):
        self.epoch = epoch
        self.last_good_state = last_good_state
        super().__init__(message)
