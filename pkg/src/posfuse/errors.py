"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric failures -> 4.
"""


class PosfuseError(Exception):
    exit_code = 1


class DomainError(PosfuseError, ValueError):
    """An argument lies outside the domain an operation is defined on."""

    exit_code = 3


class ConfigError(PosfuseError, ValueError):
    exit_code = 2


class DataError(PosfuseError, ValueError):
    """Malformed or inconsistent input data (files, shapes, statistics)."""

    exit_code = 3


class TrainingError(PosfuseError, ArithmeticError):
    """Non-finite loss or gradient during optimisation."""

    exit_code = 4

    def __init__(self, message: str, last_good_epoch: int | None = None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch
