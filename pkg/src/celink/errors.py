"""Exception types shared across the package.

The CLI maps these onto exit codes: config errors exit 2, data errors
exit 3, numeric errors exit 4.
"""


class CelinkError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CelinkError):
    """Invalid configuration value or inconsistent option combination."""


class DataError(CelinkError):
    """Malformed input file; carries file context where available."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}: "
        elif line is not None:
            prefix = f"line {line}: "
        super().__init__(prefix + message)


class DimensionError(CelinkError):
    """Operand shapes are incompatible."""


class ContractViolation(CelinkError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(CelinkError):
    """Input is structurally valid but has no meaningful answer."""


class NumericError(CelinkError):
    """A non-finite value or other numeric failure was produced."""
