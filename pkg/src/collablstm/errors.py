"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A configuration, shape or label contract was violated."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message, block=None, step=None):
        super().__init__(message)
        self.block = block
        self.step = step


class ArchiveFormatError(ValueError):
    """A text archive could not be parsed."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)
        self.path = path
        self.line = line
