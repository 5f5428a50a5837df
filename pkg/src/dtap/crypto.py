"""Signature scheme and service identity certificates.

The deployment-wide scheme is Ed25519: deterministic, 128-bit security,
64-byte signatures, 32-byte raw keys. ``verify`` never raises on a bad
signature; it only raises when the key material itself is unusable.
"""

from __future__ import annotations

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

from .errors import ConfigurationError
from .protocol import ServiceIdentity, _lp_str, _u32

_CERT_CONTEXT = b"dtap-identity-v1"


def generate_signing_key() -> Ed25519PrivateKey:
    return Ed25519PrivateKey.generate()


def signing_key_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def load_signing_key(raw: bytes) -> Ed25519PrivateKey:
    try:
        return Ed25519PrivateKey.from_private_bytes(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"malformed signing key: {exc}") from exc


def verification_key_bytes(key: Ed25519PrivateKey | Ed25519PublicKey) -> bytes:
    if isinstance(key, Ed25519PrivateKey):
        key = key.public_key()
    return key.public_bytes(Encoding.Raw, PublicFormat.Raw)


def load_verification_key(raw: bytes) -> Ed25519PublicKey:
    try:
        return Ed25519PublicKey.from_public_bytes(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"malformed verification key: {exc}") from exc


def sign(signing_key: Ed25519PrivateKey, message: bytes) -> bytes:
    return signing_key.sign(message)


def verify(
    verification_key: bytes | Ed25519PublicKey, message: bytes, signature: bytes
) -> bool:
    """True iff ``signature`` is valid for ``message`` under the key.

    Any mismatch (wrong key, flipped bit, truncated signature) returns False.
    """
    if isinstance(verification_key, bytes):
        verification_key = load_verification_key(verification_key)
    if not isinstance(signature, (bytes, bytearray)):
        return False
    try:
        verification_key.verify(bytes(signature), message)
        return True
    except InvalidSignature:
        return False


def _certificate_message(service_id: str, verification_key_raw: bytes) -> bytes:
    return (
        _CERT_CONTEXT
        + _lp_str(service_id)
        + _u32(len(verification_key_raw))
        + verification_key_raw
    )


def make_identity(service_id: str, signing_key: Ed25519PrivateKey) -> ServiceIdentity:
    """Self-signed attestation binding ``service_id`` to the public key."""
    vk = verification_key_bytes(signing_key)
    cert = sign(signing_key, _certificate_message(service_id, vk))
    return ServiceIdentity(service_id=service_id, verification_key=vk, certificate=cert)


def verify_identity(identity: ServiceIdentity) -> bool:
    """Check the self-signature; False for any inconsistency."""
    if not identity.service_id:
        return False
    try:
        key = load_verification_key(identity.verification_key)
    except ConfigurationError:
        return False
    return verify(
        key,
        _certificate_message(identity.service_id, identity.verification_key),
        identity.certificate,
    )
