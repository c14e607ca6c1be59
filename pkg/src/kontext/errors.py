"""Exception types shared across the package; the CLI maps them to exit codes."""


class KontextError(Exception):
    exit_code = 1


class ConfigError(KontextError, ValueError):
    exit_code = 2


class ContractError(KontextError, ValueError):
    exit_code = 3


class DimensionError(ContractError):
    pass


class TokenizerError(ContractError):
    pass


class NumericalError(KontextError, ArithmeticError):
    """Raised when a loss turns NaN/inf; carries where it happened."""

    exit_code = 4

    def __init__(self, message: str, step: int | None = None, task: str | None = None):
        super().__init__(message)
        self.step = step
        self.task = task
