"""Exception hierarchy.

Every error raised on purpose by the package derives from ``CascadeError`` so
the CLI can map families of failures to exit codes.
"""

from __future__ import annotations


class CascadeError(Exception):
    """Base class for all package errors."""


class InputError(CascadeError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class ContractViolation(CascadeError):
    """An external component broke its interface contract (CLI exit code 3)."""


class GeometryError(InputError, ValueError):
    """Invalid spacing, or dims that do not agree between inputs."""


class EmptyInputError(CascadeError, ValueError):
    pass


class ParseError(InputError):
    """A file could not be decoded. ``field`` names the offending header/schema field."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class BadMagicError(ParseError):
    pass


class UnsupportedDatatypeError(ParseError):
    pass


class TruncatedPayloadError(ParseError):
    pass


class DimMismatchError(ParseError):
    pass


class ChannelCountError(ParseError):
    pass


class InvalidProbabilityError(InputError, ValueError):
    pass


class BoundsError(InputError, ValueError):
    pass


class SchemaError(ParseError):
    pass


class IntegrityError(ParseError):
    pass


class InvalidFactorError(CascadeError, ValueError):
    pass


class LesionTooLargeError(CascadeError, ValueError):
    pass


class SamplingExhaustedError(CascadeError, RuntimeError):
    pass


class SpecValidationError(CascadeError, ValueError):
    pass
