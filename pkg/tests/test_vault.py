"""Vault sealing: AEAD contract, KDF binding, export round-trips."""

import pytest

from dtap.errors import VaultAuthError, VaultError
from dtap.vault import MAGIC, TokenVault

FAST_N = 2**8


def make_vault(tmp_path, passphrase="hunter2", name="vault.bin"):
    return TokenVault(tmp_path / name, passphrase, scrypt_n=FAST_N)


def test_save_load_roundtrip(tmp_path):
    vault = make_vault(tmp_path)
    data = {"channels": {"svc": {"xtoken": {"value": "abc"}}}, "recipes": {}}
    vault.save(data)
    assert vault.load() == data


def test_missing_vault_loads_empty(tmp_path):
    assert make_vault(tmp_path).load() == {"channels": {}, "recipes": {}}


def test_wrong_passphrase_is_auth_failure_not_garbage(tmp_path):
    make_vault(tmp_path).save({"channels": {}, "recipes": {}})
    with pytest.raises(VaultAuthError):
        make_vault(tmp_path, passphrase="wrong").load()


def test_plaintext_never_on_disk(tmp_path):
    vault = make_vault(tmp_path)
    secret = "super-secret-xtoken-value-1234567890abcdef"
    vault.save({"channels": {"svc": {"xtoken": secret}}, "recipes": {}})
    raw = (tmp_path / "vault.bin").read_bytes()
    assert secret.encode() not in raw
    assert raw.startswith(MAGIC)


def test_tampered_ciphertext_refused(tmp_path):
    vault = make_vault(tmp_path)
    vault.save({"channels": {}, "recipes": {}})
    path = tmp_path / "vault.bin"
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(VaultAuthError):
        vault.load()


def test_tampered_kdf_header_refused(tmp_path):
    vault = make_vault(tmp_path)
    vault.save({"channels": {}, "recipes": {}})
    path = tmp_path / "vault.bin"
    raw = path.read_bytes()
    weakened = raw.replace(b'"n": 256', b'"n": 128')
    if weakened == raw:
        weakened = raw.replace(b'"n":256', b'"n":128')
    path.write_bytes(weakened)
    with pytest.raises((VaultAuthError, VaultError)):
        vault.load()


def test_truncated_file_is_vault_error(tmp_path):
    vault = make_vault(tmp_path)
    vault.save({"channels": {}, "recipes": {}})
    path = tmp_path / "vault.bin"
    path.write_bytes(path.read_bytes()[: len(MAGIC) + 2])
    with pytest.raises(VaultError):
        vault.load()


def test_not_a_vault_file(tmp_path):
    path = tmp_path / "vault.bin"
    path.write_bytes(b"PK\x03\x04 definitely a zip")
    with pytest.raises(VaultError):
        TokenVault(path, "x", scrypt_n=FAST_N).load()


def test_export_import_byte_exact(tmp_path):
    vault = make_vault(tmp_path)
    data = {"channels": {"svc": {"service_url": "http://x"}}, "recipes": {"r1": {}}}
    vault.save(data)
    vault.export_to(tmp_path / "backup.bin")
    assert (tmp_path / "backup.bin").read_bytes() == (tmp_path / "vault.bin").read_bytes()

    other = TokenVault(tmp_path / "fresh" / "vault.bin", "hunter2", scrypt_n=FAST_N)
    restored = other.import_from(tmp_path / "backup.bin")
    assert restored == data
    assert other.load() == data


def test_import_tampered_export_refused(tmp_path):
    vault = make_vault(tmp_path)
    vault.save({"channels": {}, "recipes": {}})
    vault.export_to(tmp_path / "backup.bin")
    raw = bytearray((tmp_path / "backup.bin").read_bytes())
    raw[-3] ^= 0xFF
    (tmp_path / "backup.bin").write_bytes(bytes(raw))
    target = TokenVault(tmp_path / "restored.bin", "hunter2", scrypt_n=FAST_N)
    with pytest.raises(VaultAuthError):
        target.import_from(tmp_path / "backup.bin")
    assert not (tmp_path / "restored.bin").exists()


def test_import_with_wrong_passphrase_refused(tmp_path):
    vault = make_vault(tmp_path)
    vault.save({"channels": {}, "recipes": {}})
    vault.export_to(tmp_path / "backup.bin")
    target = TokenVault(tmp_path / "restored.bin", "different", scrypt_n=FAST_N)
    with pytest.raises(VaultAuthError):
        target.import_from(tmp_path / "backup.bin")
