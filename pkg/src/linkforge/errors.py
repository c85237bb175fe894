"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data and
validation problems exit 2, runtime failures exit 3.
"""


class LinkforgeError(Exception):
    """Base class for all toolkit errors."""


class UsageError(LinkforgeError):
    """Bad command-line invocation (unknown flag, missing argument)."""


class ParseError(LinkforgeError):
    """Malformed input file. Carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(LinkforgeError):
    """Well-formed input that violates a documented invariant."""


class DigestMismatchError(ValidationError):
    """Checkpoint was produced against different vocab/entity-table content."""


class NonFiniteError(LinkforgeError):
    """A numeric quantity that must be finite was NaN or infinite."""


class TrainingDivergedError(LinkforgeError):
    """Training produced a non-finite loss; carries the failing step."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
