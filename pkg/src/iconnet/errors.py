"""Exception hierarchy shared across the package."""


class IConNetError(Exception):
    """Base class for all package errors."""


class ShapeError(IConNetError, ValueError):
    pass


class WavFormatError(IConNetError, ValueError):
    pass


class UnsupportedCodecError(WavFormatError):
    pass


class IngestionError(IConNetError):
    pass


class ReferenceFormatError(IngestionError, ValueError):
    """A label file line that cannot be parsed."""


class ConfigurationError(IConNetError, ValueError):
    pass


class NonFiniteError(IConNetError, ArithmeticError):
    pass


class CorruptModelError(IConNetError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(IConNetError, RuntimeError):
    pass


class FoldError(IConNetError):
    """A cross-validation fold failed; ``fold_index`` names it."""

    def __init__(self, fold_index, cause):
        super().__init__(f"fold {fold_index}: {cause}")
        self.fold_index = fold_index
        self.cause = cause
