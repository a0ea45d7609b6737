"""Exception taxonomy shared across the package.

ContractError covers precondition violations (CLI exit code 2),
NumericalError covers non-finite blowups during training (exit code 3).
"""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class ParseError(ContractError):
    """A config or dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""
