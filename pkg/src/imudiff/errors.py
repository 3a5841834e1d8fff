"""Exception hierarchy; each family maps to a CLI exit code."""


class ImuDiffError(Exception):
    exit_code = 1


class ConfigError(ImuDiffError, ValueError):
    exit_code = 1


class DomainError(ImuDiffError, ValueError):
    exit_code = 1


class ParseError(DomainError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TooShortError(DomainError):
    pass


class DegenerateError(DomainError):
    pass


class InsufficientDataError(DomainError):
    pass


class StageOrderError(ImuDiffError):
    exit_code = 2


class NumericalError(ImuDiffError, ArithmeticError):
    exit_code = 3
