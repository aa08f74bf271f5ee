"""Exception types raised across the package."""


class TFNASError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(TFNASError, ValueError):
    pass


class InvalidArgumentError(TFNASError, ValueError):
    pass


class OracleInvalidError(TFNASError):
    """A gradient oracle was given a function that is not deterministic."""


class ConfigError(TFNASError, ValueError):
    pass


class WidthError(TFNASError, ValueError):
    pass


class MissingEntryError(TFNASError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing entry"


class RangeError(TFNASError, ValueError):
    pass


class ParseError(TFNASError, ValueError):
    pass


class BenchError(TFNASError, RuntimeError):
    pass


class SamplingError(TFNASError, ValueError):
    pass


class SequencingError(TFNASError, RuntimeError):
    pass


class DataError(TFNASError, ValueError):
    pass


class ArchError(TFNASError, ValueError):
    pass


class DomainError(TFNASError, ValueError):
    pass
