"""Exception types shared across the package.

Each class maps to a stable CLI exit code (see ``negmargin.cli``).
"""


class NegMarginError(Exception):
    exit_code = 1


class ContractError(NegMarginError, ValueError):
    """A caller broke a precondition (shape, range, missing state)."""

    exit_code = 2


class ConfigError(NegMarginError, ValueError):
    exit_code = 2


class FormatError(NegMarginError, ValueError):
    """A data file is malformed; the message names the byte offset or line."""

    exit_code = 4


class NumericError(NegMarginError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 5
