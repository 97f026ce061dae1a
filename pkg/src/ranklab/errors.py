"""Exception hierarchy shared by every ranklab module.

Each class carries the process exit code the command line front end uses
when the error escapes a subcommand.
"""


class RanklabError(Exception):
    exit_code = 1


class DimensionError(RanklabError, ValueError):
    """Operand shapes do not agree."""

    exit_code = 2


class ContractError(RanklabError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class DegenerateInputError(RanklabError, ValueError):
    """Input lies on a point where the operation is undefined."""

    exit_code = 4


class GradientError(RanklabError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, stale gradients)."""

    exit_code = 4


class NumericError(RanklabError, ArithmeticError):
    """NaN/Inf encountered during optimisation."""

    exit_code = 4

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class FormatError(RanklabError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(RanklabError, ValueError):
    exit_code = 2


class UnknownIdError(RanklabError, LookupError):
    """A gallery id outside ``0 .. len(gallery) - 1``."""

    exit_code = 2
