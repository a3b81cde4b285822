"""Exception types shared across the package.

Data problems (bad files, bad shapes) derive from :class:`DataError`;
numeric blow-ups derive from :class:`NumericError`. The CLI maps these to
exit codes 2 and 3.
"""


class DataError(ValueError):
    """Input data violates a contract."""


class PayloadSizeMismatch(DataError):
    pass


class NonFiniteValues(DataError):
    pass


class OutOfRangeValues(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DivisibilityError(DataError):
    pass


class LesionOutsideOrgan(DataError):
    pass


class UnknownLocation(DataError):
    pass


class EmptyMask(DataError):
    pass


class UnknownScan(DataError):
    pass


class UnknownAbnormality(DataError):
    pass


class NumericError(ArithmeticError):
    """A computation produced a non-finite intermediate."""


class NumericOverflow(NumericError):
    pass
