"""Exception hierarchy.

``exit_code`` is what the command line reports when the error escapes a
subcommand.
"""


class AtnLabError(Exception):
    exit_code = 3


class ValidationError(AtnLabError, ValueError):
    """Bad argument, bad shape, bad config value."""


class ShapeError(ValidationError):
    def __init__(self, node, expected, actual):
        self.node = node
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(
            f"shape mismatch at node {node!r}: expected {self.expected}, got {self.actual}"
        )


class BudgetViolation(ValidationError):
    pass


class DivergenceError(AtnLabError, ArithmeticError):
    exit_code = 4


class FormatError(AtnLabError):
    """Base for binary file parsing failures."""


class CorruptHeaderError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ArchMismatchError(FormatError):
    pass


class WrongMagicError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class UsageError(AtnLabError):
    """Invalid or missing command-line configuration."""

    exit_code = 2
