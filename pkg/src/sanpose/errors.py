"""Exception hierarchy. Each family maps to one CLI exit code."""


class SanError(Exception):
    exit_code = 1


class ConfigError(SanError):
    exit_code = 2


class DataError(SanError):
    exit_code = 3


class MissingFileError(DataError):
    pass


class SizeMismatchError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class SplitOverlapError(DataError):
    pass


class EmptyPairsError(DataError):
    pass


class NumericError(SanError):
    exit_code = 4
