"""Exception hierarchy shared by every phymt module.

The CLI maps :class:`ValidationError` subclasses to exit code 2 and
:class:`NumericalFailure` subclasses to exit code 3.
"""


class PhymtError(Exception):
    """Base class for all phymt errors."""


class ValidationError(PhymtError, ValueError):
    """Bad input, configuration or file contents."""


class InvalidInputError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class InvalidRankError(ValidationError):
    pass


class CapacityError(ValidationError):
    """Brute-force enumeration would exceed its guard."""


class FormatError(ValidationError):
    """File magic or version does not match."""


class CorruptFileError(ValidationError):
    """File is truncated or its payload disagrees with its header."""


class MissingDataError(ValidationError):
    pass


class NumericalFailure(PhymtError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class SingularSystemError(NumericalFailure):
    pass


class DegenerateOutputError(NumericalFailure):
    pass


class DegenerateStatsError(NumericalFailure):
    pass
