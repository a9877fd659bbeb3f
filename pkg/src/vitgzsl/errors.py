"""Exception hierarchy.

Three families map onto CLI exit codes: usage problems (2), data problems (3)
and numeric failures (4).
"""


class VitGzslError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 3


class UsageError(VitGzslError):
    exit_code = 2


class DataError(VitGzslError):
    exit_code = 3


class NumericError(VitGzslError):
    exit_code = 4


# -- numerics -----------------------------------------------------------------


class ShapeMismatch(VitGzslError, ValueError):
    pass


class LabelOutOfRange(VitGzslError, ValueError):
    pass


class NonFiniteGradient(NumericError):
    pass


class TapeError(VitGzslError, RuntimeError):
    pass


# -- configuration ------------------------------------------------------------


class ConfigError(UsageError, ValueError):
    pass


class IndivisibleImage(ConfigError):
    pass


class SpecInvalid(ConfigError):
    pass


class LayerOutOfRange(UsageError, IndexError):
    pass


class IndexOutOfRange(UsageError, IndexError):
    pass


class OutOfRange(VitGzslError, ValueError):
    pass


class KindMismatch(VitGzslError, ValueError):
    pass


# -- model state --------------------------------------------------------------


class FrozenModel(VitGzslError, RuntimeError):
    pass


class MissingModule(VitGzslError, RuntimeError):
    pass


class UntrainedModel(VitGzslError, RuntimeError):
    pass


# -- data ---------------------------------------------------------------------


class EmptyDataset(DataError):
    pass


class EmptyClass(DataError):
    pass


class MissingClass(DataError):
    pass


class UnseenClassInBatch(DataError):
    pass


class TaintViolation(DataError):
    pass


# -- file formats -------------------------------------------------------------


class FormatError(DataError):
    pass


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class MissingTensor(FormatError):
    pass


class DimMismatch(FormatError):
    pass


class CorruptLength(FormatError):
    pass


class ParseError(FormatError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class RaggedRow(ParseError):
    pass
