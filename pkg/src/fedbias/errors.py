"""Exception types shared across the toolkit.

Each maps onto a CLI exit code (see ``fedbias.cli``).
"""


class FedBiasError(Exception):
    exit_code = 1


class InvalidArgument(FedBiasError, ValueError):
    exit_code = 2


class SchemaError(FedBiasError, KeyError):
    exit_code = 2

    def __str__(self) -> str:
        # KeyError quotes its message; keep it readable.
        return str(self.args[0]) if self.args else ""


class ConfigError(FedBiasError, ValueError):
    exit_code = 2


class NotFound(FedBiasError, FileNotFoundError):
    exit_code = 3


class NumericError(FedBiasError, ArithmeticError):
    exit_code = 4
