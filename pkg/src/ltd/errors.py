"""Exception hierarchy shared across the toolkit.

The CLI maps the three families below onto its exit codes:
``LTDValidationError`` -> 1, ``LTDIOError`` -> 2, ``NumericError`` -> 3.
"""


class LTDError(Exception):
    """Base class for every error raised by this package."""


class LTDValidationError(LTDError, ValueError):
    """Bad input, configuration or contract violation."""


class DimensionError(LTDValidationError):
    pass


class ConfigError(LTDValidationError):
    pass


class ContractError(LTDValidationError):
    pass


class ManifestError(LTDValidationError):
    pass


class ParameterError(LTDValidationError):
    pass


class NumericError(LTDError, ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class LTDIOError(LTDError, OSError):
    pass


class CodecError(LTDIOError):
    pass


class ArchiveError(LTDIOError):
    pass


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class MissingTensorError(ArchiveError):
    def __init__(self, name):
        super().__init__(f"missing tensor: {name}")
        self.name = name


class ShapeMismatchError(ArchiveError):
    pass


class NonFiniteWeightError(ArchiveError):
    def __init__(self, name):
        super().__init__(f"non-finite weight in tensor: {name}")
        self.name = name
