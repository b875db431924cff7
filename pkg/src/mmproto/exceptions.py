"""Exception hierarchy.

Two families map onto CLI exit codes: :class:`DataValidationError` (exit 2)
for malformed inputs and :class:`NumericalError` (exit 3) for degenerate
numerics.
"""


class MMProtoError(Exception):
    """Base class for all package errors."""


class DataValidationError(MMProtoError, ValueError):
    pass


class NumericalError(MMProtoError, ArithmeticError):
    pass


class DimensionMismatchError(DataValidationError):
    pass


class ShapeMismatchError(DataValidationError):
    pass


class RowCountMismatchError(DataValidationError):
    pass


class ExactZeroRowError(NumericalError):
    pass


class DegenerateCovarianceError(NumericalError):
    pass


class NonFiniteValueError(DataValidationError):
    pass


class BadMagicError(DataValidationError):
    pass


class VersionUnsupportedError(DataValidationError):
    pass


class TruncatedPayloadError(DataValidationError):
    pass


class ChecksumMismatchError(DataValidationError):
    pass


class DuplicateCategoryIdError(DataValidationError):
    pass


class EmptyReferenceSetError(DataValidationError):
    pass


class RowIndexOutOfRangeError(DataValidationError):
    pass


class ReferenceSetError(DataValidationError):
    """Reference set violates the exemplar or size constraints."""


class MissingReferencesError(DataValidationError):
    def __init__(self, category_id):
        super().__init__(f"category {category_id} has no reference set")
        self.category_id = category_id


class OutOfRangeError(DataValidationError):
    pass


class MissingConventionalError(DataValidationError):
    pass


class KOutOfRangeError(DataValidationError):
    pass


class LabelOutOfRangeError(DataValidationError):
    pass


class UnsatisfiableSeparationError(NumericalError):
    pass


class SingleClusterError(DataValidationError):
    pass


class ConfigError(DataValidationError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
