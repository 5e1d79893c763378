class MeanFieldToolsError(Exception):
    """Base class for all errors raised by meanfield-tools."""


class InvalidInputError(MeanFieldToolsError, ValueError):
    """Arguments violate a documented precondition."""


class NumericOverflowError(MeanFieldToolsError, ArithmeticError):
    """A simulation produced non-finite values and was aborted."""


class GridRangeError(MeanFieldToolsError, ValueError):
    """A requested time is off the recorded grid or beyond its horizon."""


class DegenerateInputError(MeanFieldToolsError, ValueError):
    """Samples carry no information (for example zero variance)."""


class IntegrityError(MeanFieldToolsError):
    """A manifest no longer matches the files it describes."""


class ModelError(MeanFieldToolsError):
    """An assembled model violates a structural requirement such as PSD."""
