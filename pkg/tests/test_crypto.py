"""Digest, signature, Merkle map and block cipher behavior.

The digest vectors are frozen constants; if these move, every stored block
address in an existing deployment silently changes, so they get exact
equality checks rather than roundtrips.
"""

import random

import pytest

from safius.crypto import (BlockCipher, HashScheme, KeyRegistry, MerkleMap,
                           derive_seed)
from safius.errors import DecryptFailure, RegistryError

SHA256_EMPTY = ("e3b0c44298fc1c149afbf4c8996fb924"
                "27ae41e4649b934ca495991b7852b855")
SHA1_EMPTY = "da39a3ee5e6b4b0d3255bfef95601890afd80709"
SHA256_ABC = ("ba7816bf8f01cfea414140de5dae2223"
              "b00361a396177a9cb410ff61f20015ad")


def test_digest_vectors():
    assert HashScheme("sha256").digest(b"").hex() == SHA256_EMPTY
    assert HashScheme("sha1").digest(b"").hex() == SHA1_EMPTY
    assert HashScheme("sha256").digest(b"abc").hex() == SHA256_ABC


def test_digest_parts_equals_concatenation():
    s = HashScheme()
    assert s.digest_parts(b"ab", b"c") == s.digest(b"abc")


def test_digest_width_check():
    s = HashScheme()
    assert s.check(b"\x00" * 32) == b"\x00" * 32
    with pytest.raises(ValueError):
        s.check(b"\x00" * 20)


def test_scheme_rejects_unknown_algorithm():
    with pytest.raises(ValueError):
        HashScheme("md5-but-worse")


def test_derive_seed_is_deterministic_and_labled():
    s = HashScheme()
    assert derive_seed(s, "a", "b") == derive_seed(s, "a", "b")
    assert derive_seed(s, "a", "b") != derive_seed(s, "ab", "")
    assert len(derive_seed(s, "x")) == 32


# -- signatures ---------------------------------------------------------------


def _registry(*uids):
    s = HashScheme()
    r = KeyRegistry()
    for uid in uids:
        r.register_signer(uid, derive_seed(s, "t", str(uid)))
    return s, r


def test_sign_verify_roundtrip():
    s, r = _registry(5)
    d = s.digest(b"payload")
    assert r.verify(5, d, r.sign(5, d))


def test_verify_rejects_tampered_digest_and_signature():
    s, r = _registry(5)
    d = s.digest(b"payload")
    sig = r.sign(5, d)
    bad = bytes([d[0] ^ 1]) + d[1:]
    assert not r.verify(5, bad, sig)
    flipped = type(sig)(bytes([sig.data[0] ^ 1]) + sig.data[1:], sig.signer)
    assert not r.verify(5, d, flipped)


def test_verify_rejects_wrong_principal():
    s, r = _registry(5, 6)
    d = s.digest(b"payload")
    assert not r.verify(6, d, r.sign(5, d))


def test_verifier_only_registration_cannot_sign():
    s, r = _registry(5)
    r2 = KeyRegistry()
    r2.register_verifier(5, r.public_bytes(5))
    d = s.digest(b"x")
    assert r2.verify(5, d, r.sign(5, d))
    assert not r2.can_sign(5)
    with pytest.raises(RegistryError):
        r2.sign(5, d)


# -- Merkle map ---------------------------------------------------------------


def test_merkle_map_matches_dict_under_random_ops():
    s = HashScheme()
    rng = random.Random(41)
    m = MerkleMap(s)
    shadow: dict[bytes, bytes] = {}
    keys = [s.digest(bytes([i])) for i in range(40)]
    for _ in range(2000):
        k = keys[rng.randrange(len(keys))]
        if rng.random() < 0.3:
            m.delete(k)
            shadow.pop(k, None)
        else:
            v = rng.randbytes(rng.randrange(1, 24))
            m.put(k, v)
            shadow[k] = v
        assert m.get(k) == shadow.get(k)
    assert len(m) == len(shadow)
    assert dict(m.items_sorted()) == shadow


def test_merkle_root_tracks_content_not_history():
    # Two maps reaching the same content along different op orders must
    # agree on the root; that agreement is what licenses pruning.
    s = HashScheme()
    a, b = MerkleMap(s), MerkleMap(s)
    k1, k2 = s.digest(b"1"), s.digest(b"2")
    a.put(k1, b"x")
    a.put(k2, b"y")
    b.put(k2, b"old")
    b.put(k1, b"x")
    b.put(k2, b"y")
    assert a.root() == b.root()
    b.delete(k2)
    assert a.root() != b.root()
    b.put(k2, b"y")
    assert a.root() == b.root()


def test_merkle_empty_root_is_stable():
    s = HashScheme()
    assert MerkleMap(s).root() == MerkleMap(s).root()
    m = MerkleMap(s)
    m.put(s.digest(b"k"), b"v")
    m.delete(s.digest(b"k"))
    assert m.root() == MerkleMap(s).root()


def test_first_divergence_finds_lowest_differing_key():
    s = HashScheme()
    items = sorted((s.digest(bytes([i])), bytes([i])) for i in range(8))
    other = list(items)
    other[3] = (other[3][0], b"mutated")
    assert MerkleMap.first_divergence(items, other) == items[3][0]
    missing = items[:5] + items[6:]
    assert MerkleMap.first_divergence(items, missing) == items[5][0]
    assert MerkleMap.first_divergence(items, list(items)) is None


# -- block cipher -------------------------------------------------------------


def _cipher(fgrp=3):
    s = HashScheme()
    c = BlockCipher(s)
    c.register(fgrp, derive_seed(s, "cipher", str(fgrp)))
    return s, c


def test_cipher_roundtrip():
    _, c = _cipher()
    for size in (0, 1, 4096):
        plain = bytes(range(256)) * (size // 256) + b"z" * (size % 256)
        assert c.decrypt(3, c.encrypt(3, plain)) == plain


def test_convergent_encryption_is_deterministic():
    # Same key and plaintext must give the same ciphertext, hence the same
    # block address: deduplication and bitwise crash oracles both rely on it.
    s, c = _cipher()
    blob1 = c.encrypt(3, b"identical content")
    blob2 = c.encrypt(3, b"identical content")
    assert blob1 == blob2
    assert s.digest(blob1) == s.digest(blob2)


def test_different_key_changes_ciphertext():
    s, c = _cipher()
    c.register(4, derive_seed(s, "cipher", "other"))
    assert c.encrypt(3, b"shared plaintext") != c.encrypt(4, b"shared plaintext")


def test_tamper_fails_authentication():
    _, c = _cipher()
    blob = bytearray(c.encrypt(3, b"payload bytes"))
    blob[14] ^= 0x20
    with pytest.raises(DecryptFailure):
        c.decrypt(3, bytes(blob))


def test_wrong_key_fails_authentication():
    s, c = _cipher()
    blob = c.encrypt(3, b"payload bytes")
    c2 = BlockCipher(s)
    c2.register(3, derive_seed(s, "cipher", "unrelated"))
    with pytest.raises(DecryptFailure):
        c2.decrypt(3, blob)


def test_unregistered_filegroup_is_an_error():
    _, c = _cipher()
    with pytest.raises(RegistryError):
        c.encrypt(9, b"x")
    with pytest.raises(RegistryError):
        c.decrypt(9, b"\x00" * 40)


def test_short_ciphertext_rejected():
    _, c = _cipher()
    with pytest.raises(DecryptFailure):
        c.decrypt(3, b"\x00" * 20)
