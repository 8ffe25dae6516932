"""Cryptographic primitives: signing, sealed boxes, symmetric AEAD, digests.

Wraps the `cryptography` package (Ed25519 / X25519 / ChaCha20-Poly1305 /
SHA-256). Key generation is deterministic from caller-supplied PRNG state so
that a whole simulation replays byte-identically under a fixed seed; nothing
here ever reads the OS entropy pool.
"""

from __future__ import annotations

import hashlib
import json
import random
from typing import Any

from cryptography.exceptions import InvalidSignature as _InvalidSignature
from cryptography.exceptions import InvalidTag as _InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure

DIGEST_BYTES = 32
KEY_BYTES = 32
NONCE_BYTES = 12
SIGNATURE_BYTES = 64

_RAW_PUBLIC = {
    "encoding": serialization.Encoding.Raw,
    "format": serialization.PublicFormat.Raw,
}


def digest(data: bytes) -> bytes:
    """SHA-256 of `data`; deterministic, 32 bytes."""
    return hashlib.sha256(data).digest()


def canonical_bytes(obj: Any) -> bytes:
    """Stable byte encoding of a JSON-able object (sorted keys, no spaces).

    Everything that is signed or content-addressed goes through this one
    encoder so signatures and ids recompute bit-exactly.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def random_bytes(rng: random.Random, n: int) -> bytes:
    return rng.randbytes(n)


class SigningKey:
    """Ed25519 keypair; private half never leaves this object unasked."""

    def __init__(self, private: Ed25519PrivateKey):
        self._private = private
        self.public_bytes: bytes = private.public_key().public_bytes(**_RAW_PUBLIC)

    @classmethod
    def from_seed(cls, seed: bytes) -> "SigningKey":
        if len(seed) != KEY_BYTES:
            raise ValueError("signing key seed must be 32 bytes")
        return cls(Ed25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def generate(cls, rng: random.Random) -> "SigningKey":
        return cls.from_seed(random_bytes(rng, KEY_BYTES))

    def sign(self, message: bytes) -> bytes:
        return self._private.sign(message)

    def private_bytes(self) -> bytes:
        return self._private.private_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PrivateFormat.Raw,
            encryption_algorithm=serialization.NoEncryption(),
        )


def verify(public_bytes: bytes, message: bytes, signature: bytes) -> bool:
    """True iff `signature` is a valid Ed25519 signature by `public_bytes`."""
    try:
        Ed25519PublicKey.from_public_bytes(public_bytes).verify(signature, message)
        return True
    except (_InvalidSignature, ValueError):
        return False


class AgreementKey:
    """X25519 keypair used for session-key agreement and sealed boxes."""

    def __init__(self, private: X25519PrivateKey):
        self._private = private
        self.public_bytes: bytes = private.public_key().public_bytes(**_RAW_PUBLIC)

    @classmethod
    def from_seed(cls, seed: bytes) -> "AgreementKey":
        if len(seed) != KEY_BYTES:
            raise ValueError("agreement key seed must be 32 bytes")
        return cls(X25519PrivateKey.from_private_bytes(seed))

    @classmethod
    def generate(cls, rng: random.Random) -> "AgreementKey":
        return cls.from_seed(random_bytes(rng, KEY_BYTES))

    def shared_secret(self, peer_public: bytes) -> bytes:
        return self._private.exchange(X25519PublicKey.from_public_bytes(peer_public))


def derive_key(secret: bytes, salt: bytes, info: bytes) -> bytes:
    """HKDF-SHA256: one 32-byte key from a shared secret and context."""
    kdf = HKDF(algorithm=hashes.SHA256(), length=KEY_BYTES, salt=salt, info=info)
    return kdf.derive(secret)


def encrypt(key: bytes, plaintext: bytes, rng: random.Random, aad: bytes = b"") -> bytes:
    """Symmetric AEAD seal: returns nonce || ciphertext+tag."""
    nonce = random_bytes(rng, NONCE_BYTES)
    return nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    """Open a blob produced by `encrypt`; AuthFailure on tamper or wrong key."""
    if len(blob) < NONCE_BYTES + 16:
        raise AuthFailure("ciphertext too short")
    nonce, ct = blob[:NONCE_BYTES], blob[NONCE_BYTES:]
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ct, aad)
    except _InvalidTag as exc:
        raise AuthFailure("decryption failed") from exc


def seal(recipient_public: bytes, plaintext: bytes, rng: random.Random) -> bytes:
    """Public-key seal: ephemeral X25519 + AEAD. Only the recipient opens it.

    Layout: ephemeral_public(32) || nonce(12) || ciphertext+tag.
    """
    ephemeral = AgreementKey.generate(rng)
    key = derive_key(
        ephemeral.shared_secret(recipient_public),
        salt=digest(ephemeral.public_bytes + recipient_public),
        info=b"sealed-box-v1",
    )
    nonce = random_bytes(rng, NONCE_BYTES)
    ct = ChaCha20Poly1305(key).encrypt(nonce, plaintext, b"")
    return ephemeral.public_bytes + nonce + ct


def unseal(recipient: AgreementKey, blob: bytes) -> bytes:
    """Open a sealed box; AuthFailure on tamper or wrong recipient key."""
    if len(blob) < KEY_BYTES + NONCE_BYTES + 16:
        raise AuthFailure("sealed box too short")
    eph_pub = blob[:KEY_BYTES]
    nonce = blob[KEY_BYTES : KEY_BYTES + NONCE_BYTES]
    ct = blob[KEY_BYTES + NONCE_BYTES :]
    try:
        key = derive_key(
            recipient.shared_secret(eph_pub),
            salt=digest(eph_pub + recipient.public_bytes),
            info=b"sealed-box-v1",
        )
        return ChaCha20Poly1305(key).decrypt(nonce, ct, b"")
    except (_InvalidTag, ValueError) as exc:
        raise AuthFailure("unseal failed") from exc


def session_key(
    local: AgreementKey, peer_public: bytes, local_did: str, peer_did: str
) -> bytes:
    """Derive the pairwise channel key; both endpoints compute the same value.

    The salt binds the key to the two connection DIDs in order-independent
    form, so the same keypairs reused on another connection (which the
    protocol forbids anyway) would not yield the same key.
    """
    salt = digest("|".join(sorted((local_did, peer_did))).encode())
    return derive_key(local.shared_secret(peer_public), salt=salt, info=b"session-v1")
