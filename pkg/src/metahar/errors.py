"""Exception hierarchy used across the package."""


class MetaHarError(Exception):
    """Base class for all package errors."""


class ConfigError(MetaHarError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(MetaHarError, ValueError):
    """Array dimensions do not conform."""


class ParameterMismatchError(MetaHarError, KeyError):
    """A gradient map does not line up with a parameter set."""

    def __init__(self, name, message):
        self.name = name
        super().__init__(f"parameter {name!r}: {message}")

    def __str__(self):
        return self.args[0]


class DataError(MetaHarError, ValueError):
    """Malformed or inconsistent dataset content."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class TrainingError(MetaHarError, RuntimeError):
    """Training could not proceed (e.g. non-finite loss)."""
