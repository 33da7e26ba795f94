"""Exception types raised across the package."""


class EFMError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(EFMError, ValueError):
    pass


class InvalidInputError(EFMError, ValueError):
    pass


class ParseError(EFMError, ValueError):
    """Malformed dataset or checkpoint file.

    The message always names the offending line or field.
    """


class IllPosedError(EFMError, ValueError):
    pass


class IntegrationError(EFMError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingAborted(EFMError, RuntimeError):
    pass
