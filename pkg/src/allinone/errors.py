"""Exception hierarchy.

CLI exit codes hang off the class: config errors exit 2, data errors 3,
numeric aborts 4.
"""


class AllInOneError(Exception):
    exit_code = 1


class ConfigError(AllInOneError):
    exit_code = 2


class DimensionError(AllInOneError, ValueError):
    """Shape mismatch; ``axis`` names the offending axis when known."""

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class StateError(AllInOneError, RuntimeError):
    pass


class RangeError(AllInOneError, IndexError):
    pass


class NumericError(AllInOneError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, name=None, switch=None, iteration=None):
        super().__init__(message)
        self.name = name
        self.switch = switch
        self.iteration = iteration


class CalibrationError(AllInOneError):
    pass


class ArityError(AllInOneError, ValueError):
    pass


# dataset ingestion

class IngestionError(AllInOneError):
    exit_code = 3


class BadMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class CountMismatchError(IngestionError):
    pass


class LabelRangeError(IngestionError):
    pass


class RecordSizeError(IngestionError):
    pass


# compact model loading

class FormatError(AllInOneError):
    exit_code = 3


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
