"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class McrError(Exception):
    """Base class for all package errors."""


class FormatError(McrError, ValueError):
    """A file or in-memory structure does not match its declared format."""


class ConfigError(McrError, ValueError):
    """Invalid user-supplied configuration or parameters."""


class NumericError(McrError, ArithmeticError):
    """A numerical procedure cannot produce a meaningful answer."""


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap."""
