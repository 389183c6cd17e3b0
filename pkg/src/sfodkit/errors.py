"""Exception hierarchy shared by all sfodkit modules."""


class SfodkitError(Exception):
    """Base class for all errors raised by sfodkit."""


class InvalidInputError(SfodkitError, ValueError):
    """An argument violates a documented precondition or invariant."""


class ValidationError(SfodkitError, ValueError):
    """Ingested data fails schema or invariant validation."""


class FormatError(SfodkitError, ValueError):
    """A binary or text file does not match its documented format."""
