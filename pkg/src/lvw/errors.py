"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class LVWError(Exception):
    pass


class ConfigError(LVWError, ValueError):
    pass


class DataError(LVWError, ValueError):
    pass


class NumericError(LVWError, ArithmeticError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class StaleCacheError(DataError):
    pass
