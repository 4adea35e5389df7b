"""Exception hierarchy shared by all modules."""


class RSMMError(Exception):
    """Base class for library errors."""


class InvalidArgument(RSMMError, ValueError):
    pass


class InvalidState(RSMMError, RuntimeError):
    pass


class NumericalError(RSMMError, ArithmeticError):
    """Raised when a computation cannot deliver a finite or accurate result."""


class CorruptFile(RSMMError, IOError):
    pass


class ParseError(RSMMError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
