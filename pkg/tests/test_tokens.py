"""Opaque token generation and wire codec."""

import pytest

from dtap.errors import EncodingError
from dtap.protocol import b64u_encode, new_token, token_bytes


def test_consecutive_tokens_distinct():
    assert new_token() != new_token()


def test_wire_roundtrip_is_32_bytes():
    wire = new_token()
    raw = token_bytes(wire)
    assert len(raw) == 32
    assert b64u_encode(raw) == wire


def test_wire_form_is_urlsafe():
    wire = new_token()
    assert "=" not in wire and "+" not in wire and "/" not in wire


def test_ten_thousand_tokens_all_distinct():
    tokens = {new_token() for _ in range(10_000)}
    assert len(tokens) == 10_000


@pytest.mark.parametrize("bad", ["", "abc", "!" * 43])
def test_bad_wire_tokens_rejected(bad):
    with pytest.raises(EncodingError):
        token_bytes(bad)
