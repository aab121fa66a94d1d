class DmdtError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(DmdtError, ValueError):
    """Raised when operand shapes are incompatible."""


class InvalidMaskError(DmdtError, ValueError):
    """Raised when a mask leaves no position to attend to or average over."""


class ContractError(DmdtError, RuntimeError):
    """Raised when an operation is called outside its documented contract."""


class ConfigError(DmdtError, ValueError):
    pass


class VocabError(DmdtError, ValueError):
    pass


class GenerationError(DmdtError, RuntimeError):
    pass


class ParseError(DmdtError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CorruptCheckpointError(DmdtError, IOError):
    pass
