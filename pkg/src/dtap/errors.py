"""Shared exception types.

Service-facing errors map onto HTTP statuses in ``httpkit``; protocol-level
errors are raised by pure functions and wrapped by the services.
"""


class DtapError(Exception):
    """Base class for every error this package raises deliberately."""


class EncodingError(DtapError):
    """A value cannot be canonically encoded (bad UTF-8, out-of-range int)."""


class ConfigurationError(DtapError):
    """Malformed key material or invalid service configuration."""


class AuthError(DtapError):
    """Bad credentials or an unknown/revoked bearer token."""


class ScopeError(DtapError):
    """A function was requested outside the permitted set."""


class ValidationError(DtapError):
    """A request is structurally well-formed but violates a contract."""


class NotFoundError(DtapError):
    """Unknown resource identifier."""


class InvalidGrantError(DtapError):
    """Authorization code is unknown, expired, or already consumed."""


class FieldMissingError(DtapError):
    """A predicate or binding references a trigger-data field that is absent."""


class PredicateTypeError(DtapError):
    """A relational predicate operand does not parse as a number."""


class PredicateSyntaxError(DtapError):
    """Predicate text failed to parse; carries the offending position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ParamResolutionError(DtapError):
    """A parameter binding could not be satisfied from trigger data."""


class VaultError(DtapError):
    """Vault file is structurally invalid."""


class VaultAuthError(VaultError):
    """Vault decryption failed authentication (wrong passphrase or tamper)."""
