"""Canonical model bytes, SHA-256 digests and AES-256-GCM model envelopes.

Canonical layout (all integers little-endian uint32)::

    b"FLM1" | arch_id | activation | n_dims | dims[n_dims] | weights (float32 LE)

Envelope wire layout::

    sender_id (u32) | len | nonce | len | ciphertext | len | tag

The sender id is bound as associated data, so every byte of the envelope is
covered by the authentication tag.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .model import Activation, ArchitectureSpec, ArchKind, ModelParams

MAGIC = b"FLM1"
NONCE_LEN = 12
TAG_LEN = 16
KEY_LEN = 32
DIGEST_LEN = 32


class CanonError(ValueError):
    """Bytes do not parse as a canonical model or envelope."""


class EnvelopeFormatError(CanonError):
    pass


class AuthenticationError(Exception):
    """AEAD tag check failed: wrong key or modified envelope."""


class NonceReuseError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelDigest:
    bytes: bytes

    def __post_init__(self):
        if not isinstance(self.bytes, (bytes, bytearray)) or len(self.bytes) != DIGEST_LEN:
            raise ValueError("a model digest is exactly 32 bytes")
        object.__setattr__(self, "bytes", bytes(self.bytes))

    @classmethod
    def fromhex(cls, text: str) -> "ModelDigest":
        return cls(bytes.fromhex(text))

    def hex(self) -> str:
        return self.bytes.hex()

    def __lt__(self, other: "ModelDigest") -> bool:
        return self.bytes < other.bytes

    def __str__(self):
        return self.hex()


def canonical_serialize(model: ModelParams) -> bytes:
    arch = model.arch
    head = struct.pack("<4sIII", MAGIC, int(arch.arch_id), int(arch.activation), len(arch.layer_dims))
    dims = struct.pack(f"<{len(arch.layer_dims)}I", *arch.layer_dims)
    return head + dims + model.weights.astype("<f4").tobytes()


def canonical_deserialize(data: bytes) -> ModelParams:
    data = bytes(data)
    if len(data) < 16 or data[:4] != MAGIC:
        raise CanonError("missing model magic tag")
    _, arch_id, act, n_dims = struct.unpack_from("<4sIII", data)
    if len(data) < 16 + 4 * n_dims:
        raise CanonError("truncated layer dims")
    dims = struct.unpack_from(f"<{n_dims}I", data, 16)
    try:
        arch = ArchitectureSpec(ArchKind(arch_id), dims, Activation(act))
    except ValueError as exc:
        raise CanonError(f"bad architecture header: {exc}") from exc
    body = data[16 + 4 * n_dims:]
    if len(body) != 4 * arch.param_count:
        raise CanonError(f"expected {4 * arch.param_count} weight bytes, got {len(body)}")
    try:
        return ModelParams(arch, np.frombuffer(body, dtype="<f4"))
    except ValueError as exc:
        raise CanonError(str(exc)) from exc


def sha256(data: bytes) -> ModelDigest:
    return ModelDigest(hashlib.sha256(data).digest())


def model_hash(model: ModelParams) -> ModelDigest:
    return sha256(canonical_serialize(model))


@dataclass(frozen=True)
class CipherEnvelope:
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes
    sender_id: int

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<I", self.sender_id)]
        for chunk in (self.nonce, self.ciphertext, self.auth_tag):
            parts.append(struct.pack("<I", len(chunk)) + chunk)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CipherEnvelope":
        data = bytes(data)
        try:
            (sender,) = struct.unpack_from("<I", data)
            pos, chunks = 4, []
            for _ in range(3):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + n > len(data):
                    raise EnvelopeFormatError("length prefix runs past end of envelope")
                chunks.append(data[pos:pos + n])
                pos += n
        except struct.error as exc:
            raise EnvelopeFormatError("truncated envelope") from exc
        if pos != len(data):
            raise EnvelopeFormatError("trailing bytes after envelope")
        nonce, ct, tag = chunks
        if len(nonce) != NONCE_LEN or len(tag) != TAG_LEN:
            raise EnvelopeFormatError("bad nonce or tag length")
        return cls(nonce, ct, tag, sender)


class NonceCounter:
    """Per-sender monotonic 96-bit nonce source; refuses to emit a nonce twice."""

    def __init__(self, start: int = 0):
        self._next = start
        self._used: set[bytes] = set()

    def next(self) -> bytes:
        nonce = self._next.to_bytes(NONCE_LEN, "big")
        self._next += 1
        self.claim(nonce)
        return nonce

    def claim(self, nonce: bytes) -> bytes:
        if nonce in self._used:
            raise NonceReuseError(f"nonce {nonce.hex()} already used under this key")
        self._used.add(nonce)
        return nonce


@dataclass
class KeyStore:
    """client id -> 256-bit key. Keys never appear in repr or serialized output."""

    _keys: dict[int, bytes] = field(default_factory=dict, repr=False)

    def register(self, client_id: int, key: bytes | None = None) -> bytes:
        if client_id in self._keys:
            raise KeyError(f"client {client_id} already has a key")
        key = os.urandom(KEY_LEN) if key is None else bytes(key)
        if len(key) != KEY_LEN:
            raise ValueError("keys are 32 bytes")
        self._keys[client_id] = key
        return key

    def key_for(self, client_id: int) -> bytes:
        try:
            return self._keys[client_id]
        except KeyError:
            raise KeyError(f"client {client_id} is not registered") from None

    def __contains__(self, client_id) -> bool:
        return client_id in self._keys

    def clients(self) -> list[int]:
        return sorted(self._keys)

    def __repr__(self):
        return f"KeyStore(clients={self.clients()})"


def derive_key(secret: bytes | int, client_id: int) -> bytes:
    """Deterministic pre-shared key for simulations (stand-in for a key exchange)."""
    if isinstance(secret, int):
        secret = secret.to_bytes(8, "little", signed=True)
    return hashlib.sha256(b"fedpolicy-key" + secret + client_id.to_bytes(4, "little")).digest()


def _aad(sender_id: int) -> bytes:
    return struct.pack("<I", sender_id)


def encrypt_bytes(plaintext: bytes, key: bytes, sender_id: int, nonces: NonceCounter,
                  nonce: bytes | None = None) -> CipherEnvelope:
    nonce = nonces.next() if nonce is None else nonces.claim(bytes(nonce))
    sealed = AESGCM(key).encrypt(nonce, plaintext, _aad(sender_id))
    return CipherEnvelope(nonce, sealed[:-TAG_LEN], sealed[-TAG_LEN:], sender_id)


def decrypt_bytes(env: CipherEnvelope, key: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(env.nonce, env.ciphertext + env.auth_tag, _aad(env.sender_id))
    except (InvalidTag, ValueError) as exc:
        raise AuthenticationError(f"envelope from sender {env.sender_id} failed authentication") from exc


def encrypt_model(model: ModelParams, key: bytes, sender_id: int, nonces: NonceCounter,
                  nonce: bytes | None = None) -> CipherEnvelope:
    return encrypt_bytes(canonical_serialize(model), key, sender_id, nonces, nonce)


def decrypt_model(env: CipherEnvelope, key: bytes) -> ModelParams:
    return canonical_deserialize(decrypt_bytes(env, key))
