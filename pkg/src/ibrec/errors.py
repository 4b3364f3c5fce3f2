"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class IbrecError(Exception):
    pass


class ConfigError(IbrecError):
    """Bad configuration value, unknown key, or inconsistent toggles."""


class DataError(IbrecError):
    """Problem with input data files (parse, format, length, consistency)."""


class ParseError(DataError):
    """Malformed text input; message carries the offending line number."""


class FormatError(DataError):
    """Binary file failed a magic/version/length check."""


class NumericalError(IbrecError):
    """A computation produced NaN/Inf or an otherwise unusable value."""
