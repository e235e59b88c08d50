"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes: usage 1, I/O 2, validation 3,
numerical abort 4. Plain ``OSError`` is the I/O class.
"""


class ValidationError(ValueError):
    """Input violates an operation's precondition."""


class FormatError(ValidationError):
    """A binary file (WAV, SVCF, SVCK) is malformed."""

    def __init__(self, message, offset=None, name=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if name is not None:
            message = f"{message} (tensor {name!r})"
        super().__init__(message)
        self.offset = offset
        self.name = name


class NumericalError(ArithmeticError):
    """A loss became non-finite during training."""

    def __init__(self, component, step=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component {component!r}{where}")
        self.component = component
        self.step = step
