"""Exception types shared across the package.

The CLI maps these onto exit codes: argument/contract/shape/numeric
problems exit 1, I/O problems exit 2.
"""


class SaolError(Exception):
    """Base class for all package errors."""


class DimensionError(SaolError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ArgumentError(SaolError, ValueError):
    """An argument violates an operation's precondition."""


class ContractError(SaolError, ValueError):
    """A caller-side contract was violated (e.g. gold index not in subset)."""


class NumericError(SaolError, ArithmeticError):
    """A computation produced a non-finite value."""


class CorpusError(SaolError, OSError):
    """A corpus file is missing, unreadable, or misaligned."""

    def __init__(self, message, path=None, line=None):
        loc = str(path) if path is not None else ""
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{message} ({loc})" if loc else message)
        self.path = path
        self.line = line


class CheckpointError(SaolError, ValueError):
    """A checkpoint has a bad magic, version, or layout."""
