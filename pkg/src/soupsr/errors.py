"""Exception hierarchy shared by every soupsr module.

Each class carries the CLI exit code it maps to, so ``soupsr.cli`` never has
to know which module raised.
"""


class SoupError(Exception):
    exit_code = 2


class UsageError(SoupError):
    exit_code = 1


class RangeError(UsageError, ValueError):
    """A scale or index outside the supported interval."""


class ConfigurationError(UsageError, ValueError):
    pass


class DataError(SoupError, ValueError):
    """Input data violates an invariant (NaN voxels, empty corpus, ...)."""


class FormatError(DataError):
    pass


class UnsupportedError(DataError):
    pass


class DimensionError(DataError):
    pass


class ShapeError(DataError):
    pass


class CorruptionError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class NumericalError(SoupError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
