"""Exception hierarchy shared by all qdmkit modules.

Each class carries a short ``category`` string; the command line driver
reports it in its machine-readable error line and maps it to an exit code.
"""


class QDMError(Exception):
    category = "error"


class DataError(QDMError, ValueError):
    """Input data violates a documented precondition."""

    category = "data"


class ReductionError(DataError):
    """A reduction hit a zero or negative denominator.

    ``index`` is the first offending ``(point, y, x)`` triple.
    """

    def __init__(self, message, index):
        super().__init__(message)
        self.index = tuple(int(i) for i in index)


class QDCFormatError(QDMError):
    category = "format"


class BadMagicError(QDCFormatError):
    pass


class VersionMismatchError(QDCFormatError):
    pass


class TruncatedPayloadError(QDCFormatError):
    pass


class NonMonotonicSweepError(QDCFormatError):
    pass


class ChecksumMismatchError(QDCFormatError):
    pass


class ModelMismatchError(QDMError, ValueError):
    """Cube quantity or sweep kind does not match the requested model."""

    category = "mismatch"


class ParameterError(QDMError, ValueError):
    """Model parameters outside their admissible domain."""

    category = "parameter"


class FitError(QDMError):
    """A fit step that the caller cannot continue past (e.g. T1 stage 1)."""

    category = "fit"


class PeakCountError(FitError):
    def __init__(self, message, found):
        super().__init__(message)
        self.found = int(found)
