"""Encrypted at-rest storage for XTokens, pinned identities, and the recipe ledger.

The vault is one file: magic bytes, a JSON header carrying the KDF
parameters and salt, a random nonce, then AES-GCM ciphertext (tag
included). The key derives from a passphrase via scrypt, and the header is
bound as associated data, so tampering with either ciphertext or KDF
parameters fails authentication rather than yielding garbage.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.scrypt import Scrypt
from filelock import FileLock

from .errors import VaultAuthError, VaultError

MAGIC = b"DTAPVLT1"
_NONCE_LEN = 12
_KEY_LEN = 32
_SALT_LEN = 16

EMPTY_VAULT = {"channels": {}, "recipes": {}}


def _derive_key(passphrase: str, salt: bytes, n: int, r: int, p: int) -> bytes:
    kdf = Scrypt(salt=salt, length=_KEY_LEN, n=n, r=r, p=p)
    return kdf.derive(passphrase.encode("utf-8"))


class TokenVault:
    def __init__(
        self,
        path: str | Path,
        passphrase: str,
        *,
        scrypt_n: int = 2**14,
        scrypt_r: int = 8,
        scrypt_p: int = 1,
    ):
        self.path = Path(path)
        self._passphrase = passphrase
        self._params = {"n": scrypt_n, "r": scrypt_r, "p": scrypt_p}
        self._lock = FileLock(str(self.path) + ".lock")
        self._key: bytes | None = None
        self._salt: bytes | None = None

    def exists(self) -> bool:
        return self.path.exists()

    # -- sealing -------------------------------------------------------------

    def _key_for(self, salt: bytes, n: int, r: int, p: int) -> bytes:
        if self._key is None or self._salt != salt:
            self._key = _derive_key(self._passphrase, salt, n, r, p)
            self._salt = salt
        return self._key

    def _seal(self, data: dict) -> bytes:
        if self._salt is None:
            self._salt = os.urandom(_SALT_LEN)
            self._key = None
        header = {
            "kdf": "scrypt",
            "salt": self._salt.hex(),
            **self._params,
        }
        header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
        key = self._key_for(self._salt, **self._params)
        nonce = os.urandom(_NONCE_LEN)
        plaintext = json.dumps(data, sort_keys=True).encode("utf-8")
        ciphertext = AESGCM(key).encrypt(nonce, plaintext, MAGIC + header_raw)
        return (
            MAGIC
            + len(header_raw).to_bytes(4, "big")
            + header_raw
            + nonce
            + ciphertext
        )

    @staticmethod
    def _split(raw: bytes) -> tuple[dict, bytes, bytes, bytes]:
        if len(raw) < len(MAGIC) + 4 or not raw.startswith(MAGIC):
            raise VaultError("not a vault file (bad magic)")
        offset = len(MAGIC)
        header_len = int.from_bytes(raw[offset : offset + 4], "big")
        offset += 4
        header_raw = raw[offset : offset + header_len]
        offset += header_len
        nonce = raw[offset : offset + _NONCE_LEN]
        ciphertext = raw[offset + _NONCE_LEN :]
        if len(header_raw) != header_len or len(nonce) != _NONCE_LEN or not ciphertext:
            raise VaultError("vault file is truncated")
        try:
            header = json.loads(header_raw)
        except json.JSONDecodeError as exc:
            raise VaultError("vault header is not JSON") from exc
        return header, header_raw, nonce, ciphertext

    def _unseal(self, raw: bytes) -> dict:
        header, header_raw, nonce, ciphertext = self._split(raw)
        try:
            salt = bytes.fromhex(header["salt"])
            n, r, p = int(header["n"]), int(header["r"]), int(header["p"])
        except (KeyError, ValueError) as exc:
            raise VaultError(f"vault header missing KDF fields: {exc}") from exc
        key = self._key_for(salt, n, r, p)
        try:
            plaintext = AESGCM(key).decrypt(nonce, ciphertext, MAGIC + header_raw)
        except InvalidTag as exc:
            raise VaultAuthError(
                "vault authentication failed (wrong passphrase or tampered file)"
            ) from exc
        return json.loads(plaintext)

    # -- public API -----------------------------------------------------------

    def load(self) -> dict:
        """Decrypt and return vault contents; a missing vault is empty."""
        with self._lock:
            if not self.path.exists():
                return json.loads(json.dumps(EMPTY_VAULT))
            raw = self.path.read_bytes()
        return self._unseal(raw)

    def save(self, data: dict) -> None:
        sealed = self._seal(data)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_bytes(sealed)
            os.replace(tmp, self.path)

    def export_to(self, dest: str | Path) -> None:
        """Copy the sealed vault verbatim; the export is itself a valid vault."""
        with self._lock:
            if not self.path.exists():
                raise VaultError("nothing to export: vault does not exist")
            raw = self.path.read_bytes()
        Path(dest).write_bytes(raw)

    def import_from(self, source: str | Path) -> dict:
        """Verify an exported file with our passphrase, then adopt it byte-exactly."""
        raw = Path(source).read_bytes()
        data = self._unseal(raw)  # raises before anything is written
        header, *_ = self._split(raw)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(raw)
        self._salt = bytes.fromhex(header["salt"])
        self._key = None
        return data
