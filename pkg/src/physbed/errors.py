"""Exception types raised across the package."""


class PhysbedError(Exception):
    """Base class for all package errors."""


class DimensionError(PhysbedError, ValueError):
    """Grid shapes or geometries are incompatible with the requested operation."""


class ParameterError(PhysbedError, ValueError):
    """A configuration value violates its documented invariant."""


class EmptyObservationsError(PhysbedError):
    """An operation needs at least one radar observation and got none."""


class InsufficientDataError(PhysbedError):
    """Too few cells, picks or bins to compute the requested quantity."""


class ParseError(PhysbedError):
    """Malformed input file. ``lineno`` is 1-based, or None if not line specific."""

    def __init__(self, message, path=None, lineno=None):
        self.path = path
        self.lineno = lineno
        where = ""
        if path is not None:
            where = f"{path}"
            if lineno is not None:
                where += f":{lineno}"
            where += ": "
        super().__init__(where + message)


class NonFiniteLossError(PhysbedError, FloatingPointError):
    """The objective evaluated to NaN or infinity; ``term`` names the culprit."""

    def __init__(self, term, epoch=None):
        self.term = term
        self.epoch = epoch
        msg = f"non-finite value in loss term '{term}'"
        if epoch is not None:
            msg += f" at epoch {epoch}"
        super().__init__(msg)
