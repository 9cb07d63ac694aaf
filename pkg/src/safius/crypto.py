"""Hashing, signing, filegroup encryption and the refcount Merkle map.

All signatures are made over digests, never over raw payloads, so callers
hash exactly once per message.  Block encryption is convergent: the nonce is
derived from the filegroup key and the plaintext digest, which makes the
ciphertext (and therefore the block name) a pure function of (key, bytes).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives import serialization

from .errors import DecryptFailure, RegistryError

MERKLE_FANOUT = 16

_LEAF_TAG = b"\x00"
_NODE_TAG = b"\x01"
_EMPTY_TAG = b"\x02"

_HASH_WIDTHS = {"sha256": 32, "sha1": 20}


class HashScheme:
    """Pluggable content hash.  sha256/32-byte is the default; sha1/20-byte
    exists as the narrow legacy mode and is selected per deployment."""

    def __init__(self, name: str = "sha256"):
        if name not in _HASH_WIDTHS:
            raise ValueError(f"unsupported hash: {name}")
        self.name = name
        self.width = _HASH_WIDTHS[name]
        self._factory = getattr(hashlib, name)

    def digest(self, data: bytes) -> bytes:
        return self._factory(data).digest()

    def digest_parts(self, *parts: bytes) -> bytes:
        h = self._factory()
        for p in parts:
            h.update(p)
        return h.digest()

    def check(self, value: bytes) -> bytes:
        if len(value) != self.width:
            raise ValueError(f"digest width {len(value)}, expected {self.width}")
        return value

    def __repr__(self) -> str:
        return f"HashScheme({self.name})"


DEFAULT_SCHEME = HashScheme("sha256")


@dataclass(frozen=True)
class Signature:
    data: bytes
    signer: int


class KeyRegistry:
    """Maps principal ids to Ed25519 keys.  Verifiers hold only public keys;
    the registry is frozen after deployment setup.  Observers see every
    sign/verify so the harness can meter cost and spot hot-path crypto."""

    def __init__(self):
        self._private: dict[int, Ed25519PrivateKey] = {}
        self._public: dict[int, Ed25519PublicKey] = {}
        self.observers: list = []

    def register_signer(self, principal: int, seed: bytes) -> None:
        if len(seed) != 32:
            raise ValueError("signer seed must be 32 bytes")
        key = Ed25519PrivateKey.from_private_bytes(seed)
        self._private[principal] = key
        self._public[principal] = key.public_key()

    def register_verifier(self, principal: int, public_bytes: bytes) -> None:
        self._public[principal] = Ed25519PublicKey.from_public_bytes(public_bytes)

    def public_bytes(self, principal: int) -> bytes:
        key = self._public.get(principal)
        if key is None:
            raise RegistryError(f"no public key for principal {principal}")
        return key.public_bytes(serialization.Encoding.Raw,
                                serialization.PublicFormat.Raw)

    def can_sign(self, principal: int) -> bool:
        return principal in self._private

    def sign(self, principal: int, digest: bytes) -> Signature:
        key = self._private.get(principal)
        if key is None:
            raise RegistryError(f"no signing key for principal {principal}")
        for ob in self.observers:
            ob("sign")
        return Signature(data=key.sign(digest), signer=principal)

    def verify(self, principal: int, digest: bytes, sig: Signature) -> bool:
        key = self._public.get(principal)
        if key is None:
            raise RegistryError(f"no public key for principal {principal}")
        for ob in self.observers:
            ob("verify")
        if sig.signer != principal:
            return False
        try:
            key.verify(sig.data, digest)
            return True
        except InvalidSignature:
            return False


class MerkleMap:
    """Order-independent authenticated map.  The root commits to the exact
    entry set: leaves are hashed in sorted key order and grouped into a
    16-ary tree, so equal roots imply equal contents."""

    def __init__(self, scheme: HashScheme | None = None):
        self.scheme = scheme or DEFAULT_SCHEME
        self._entries: dict[bytes, bytes] = {}
        self._root: bytes | None = None

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: bytes) -> bytes | None:
        return self._entries.get(key)

    def put(self, key: bytes, value: bytes) -> None:
        if self._entries.get(key) != value:
            self._entries[key] = value
            self._root = None

    def delete(self, key: bytes) -> None:
        # Deleting an absent key is the identity, not an error.
        if key in self._entries:
            del self._entries[key]
            self._root = None

    def items_sorted(self) -> list[tuple[bytes, bytes]]:
        return sorted(self._entries.items())

    def root(self) -> bytes:
        if self._root is None:
            self._root = self._compute_root()
        return self._root

    def _compute_root(self) -> bytes:
        if not self._entries:
            return self.scheme.digest(_EMPTY_TAG)
        level = [
            self.scheme.digest_parts(
                _LEAF_TAG,
                len(k).to_bytes(4, "little"), k,
                len(v).to_bytes(4, "little"), v,
            )
            for k, v in self.items_sorted()
        ]
        while len(level) > 1:
            level = [
                self.scheme.digest_parts(_NODE_TAG, *level[i:i + MERKLE_FANOUT])
                for i in range(0, len(level), MERKLE_FANOUT)
            ]
        return level[0]

    @staticmethod
    def first_divergence(a: list[tuple[bytes, bytes]],
                         b: list[tuple[bytes, bytes]]) -> bytes | None:
        """First key (in sort order) whose value differs between two sorted
        item lists, treating absence as a difference."""
        da, db = dict(a), dict(b)
        for key in sorted(set(da) | set(db)):
            if da.get(key) != db.get(key):
                return key
        return None


class BlockCipher:
    """Per-filegroup AES-GCM with a derived nonce.

    nonce = H(key || H(plaintext))[:12], ciphertext = nonce || GCM(...).
    Nonce reuse across distinct plaintexts cannot happen because the nonce
    binds the plaintext digest; identical plaintexts produce identical
    blocks, which is what content addressing wants.
    """

    def __init__(self, scheme: HashScheme | None = None):
        self.scheme = scheme or DEFAULT_SCHEME
        self._keys: dict[int, tuple[bytes, AESGCM]] = {}

    def register(self, fgrp: int, key: bytes) -> None:
        if len(key) not in (16, 24, 32):
            raise ValueError("AES key must be 16/24/32 bytes")
        self._keys[fgrp] = (key, AESGCM(key))

    def has(self, fgrp: int) -> bool:
        return fgrp in self._keys

    def _nonce(self, key: bytes, plaintext: bytes) -> bytes:
        return self.scheme.digest_parts(key, self.scheme.digest(plaintext))[:12]

    def encrypt(self, fgrp: int, plaintext: bytes) -> bytes:
        try:
            key, aead = self._keys[fgrp]
        except KeyError:
            raise RegistryError(f"no key for filegroup {fgrp}") from None
        nonce = self._nonce(key, plaintext)
        return nonce + aead.encrypt(nonce, plaintext, None)

    def decrypt(self, fgrp: int, blob: bytes) -> bytes:
        try:
            _, aead = self._keys[fgrp]
        except KeyError:
            raise RegistryError(f"no key for filegroup {fgrp}") from None
        if len(blob) < 12 + 16:
            raise DecryptFailure("ciphertext too short")
        try:
            return aead.decrypt(blob[:12], blob[12:], None)
        except InvalidTag:
            raise DecryptFailure("authentication tag mismatch") from None


def derive_seed(scheme: HashScheme, *parts: str) -> bytes:
    """Deterministic 32-byte seed from labeled parts.  Key material and RNG
    seeds all come from here so a (config, seed) pair fixes everything."""
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode())
        h.update(b"\x00")
    return h.digest()
