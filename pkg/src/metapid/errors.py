"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters."""


class NumericError(FloatingPointError):
    """Non-finite values reached a numeric routine."""


class DataError(ValueError):
    """Inconsistent or malformed data."""


class SchemaVersionError(DataError):
    """A persisted document carries an unsupported schema_version."""


class ParseError(DataError):
    """A persisted file could not be parsed.

    Attributes
    ----------
    path : str
        File being read.
    lineno : int
        1-based line number of the offending line (0 if not line oriented).
    """

    def __init__(self, path, lineno, msg):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")
