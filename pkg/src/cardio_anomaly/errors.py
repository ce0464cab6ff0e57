"""Exception types shared across the package.

The CLI maps them onto exit codes: configuration problems exit with 2,
data problems with 3 and numeric failures with 4.
"""


class ConfigError(ValueError):
    exit_code = 2


class DataError(ValueError):
    exit_code = 3


class CorruptRecordError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class SchemaError(DataError):
    pass


class NumericError(ArithmeticError):
    exit_code = 4


class ContractError(ValueError):
    """A precondition of a numeric routine was violated by the caller."""

    exit_code = 2


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given input (for example a single class)."""

    exit_code = 3
