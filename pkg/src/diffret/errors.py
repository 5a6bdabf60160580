"""Exception hierarchy. Each class carries the process exit code the CLI uses."""


class DiffRetError(Exception):
    exit_code = 1


class ConfigError(DiffRetError, ValueError):
    exit_code = 2


class FormatError(DiffRetError, ValueError):
    exit_code = 3


class TruncatedError(FormatError):
    exit_code = 4


class VersionError(FormatError):
    exit_code = 5


class NumericError(DiffRetError, ArithmeticError):
    exit_code = 6


class IOFailure(DiffRetError, OSError):
    exit_code = 7


class LookupFailure(DiffRetError, KeyError):
    exit_code = 8

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ContractError(DiffRetError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 9


class DimensionError(ContractError):
    exit_code = 9
