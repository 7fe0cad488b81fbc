"""Exception hierarchy. Each family maps onto a CLI exit code."""


class IsopropError(Exception):
    exit_code = 1


class ConfigError(IsopropError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    pass


class DataError(IsopropError):
    exit_code = 3


class MissingFileError(DataError):
    pass


class PayloadSizeError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class SplitOverlapError(DataError):
    pass


class SamplingError(DataError):
    pass


class ManifestError(DataError):
    pass


class NumericError(IsopropError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError):
    pass


class ContractError(IsopropError, ValueError):
    """Caller violated a precondition (empty group, non-scalar loss, ...)."""

    exit_code = 2
