"""Exception types shared across the package."""


class SlodError(Exception):
    """Base class for all errors raised by slod."""


class ShapeError(SlodError, ValueError):
    pass


class NumericError(SlodError, ArithmeticError):
    pass


class UsageError(SlodError, ValueError):
    pass


class FormatError(SlodError, ValueError):
    pass


class ConstraintError(SlodError, ValueError):
    """A target distribution violates the argmax-preservation constraint."""


class DomainError(SlodError, ValueError):
    pass
