"""Exception types shared across the package."""


class FormatError(ValueError):
    """A tensor file or checkpoint could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(ArithmeticError):
    """A numerical routine diverged or produced non-finite values."""
