"""Signature contract: round-trip, exhaustive bit-flips, identity certs."""

import pytest

from dtap.crypto import (
    generate_signing_key,
    load_signing_key,
    load_verification_key,
    make_identity,
    sign,
    signing_key_bytes,
    verification_key_bytes,
    verify,
    verify_identity,
)
from dtap.errors import ConfigurationError
from dtap.protocol import ServiceIdentity


@pytest.fixture(scope="module")
def keypair():
    sk = generate_signing_key()
    return sk, verification_key_bytes(sk)


def test_sign_verify_roundtrip(keypair):
    sk, vk = keypair
    message = b"attack at dawn"
    assert verify(vk, message, sign(sk, message))


def test_signing_is_deterministic(keypair):
    sk, _ = keypair
    assert sign(sk, b"m") == sign(sk, b"m")


def test_wrong_key_fails(keypair):
    sk, _ = keypair
    other_vk = verification_key_bytes(generate_signing_key())
    assert not verify(other_vk, b"m", sign(sk, b"m"))


def test_exhaustive_single_bit_flip_message(keypair):
    sk, vk = keypair
    message = bytes(range(16))
    signature = sign(sk, message)
    pk = load_verification_key(vk)
    for byte_index in range(len(message)):
        for bit in range(8):
            mutated = bytearray(message)
            mutated[byte_index] ^= 1 << bit
            assert not verify(pk, bytes(mutated), signature)


def test_single_bit_flip_signature(keypair):
    sk, vk = keypair
    message = b"payload"
    signature = bytearray(sign(sk, message))
    signature[10] ^= 0x04
    assert not verify(vk, message, bytes(signature))


def test_truncated_or_garbage_signature_is_false_not_error(keypair):
    _, vk = keypair
    assert not verify(vk, b"m", b"")
    assert not verify(vk, b"m", b"\x00" * 63)
    assert not verify(vk, b"m", None)  # type: ignore[arg-type]


def test_malformed_key_material_raises():
    with pytest.raises(ConfigurationError):
        load_verification_key(b"\x01\x02")
    with pytest.raises(ConfigurationError):
        load_signing_key(b"short")


def test_signing_key_roundtrip():
    sk = generate_signing_key()
    restored = load_signing_key(signing_key_bytes(sk))
    assert sign(restored, b"m") == sign(sk, b"m")


def test_identity_self_signature():
    identity = make_identity("shoppinglist", generate_signing_key())
    assert verify_identity(identity)


def test_identity_binding_covers_service_id():
    identity = make_identity("shoppinglist", generate_signing_key())
    forged = ServiceIdentity(
        service_id="evil",
        verification_key=identity.verification_key,
        certificate=identity.certificate,
    )
    assert not verify_identity(forged)


def test_identity_with_swapped_key_fails():
    a = make_identity("svc", generate_signing_key())
    b = make_identity("svc", generate_signing_key())
    mixed = ServiceIdentity(
        service_id="svc",
        verification_key=b.verification_key,
        certificate=a.certificate,
    )
    assert not verify_identity(mixed)


def test_identity_garbage_key_is_false_not_error():
    assert not verify_identity(
        ServiceIdentity(service_id="svc", verification_key=b"xx", certificate=b"yy")
    )
