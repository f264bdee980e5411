"""Cryptographic primitives used by every SecGrid entity.

AES-128-GCM for authenticated encryption, ECDSA over P-256 for signatures,
ECDH over P-256 for key agreement and HKDF-SHA256 for key derivation. The
heavy lifting is delegated to ``cryptography``; this module pins the
encodings, owns IV management and gives every failure a single opaque
exception type.

DH group: NIST P-256 (secp256r1), 128-bit security level.
"""
from __future__ import annotations

import hashlib
import hmac
import secrets
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator, Optional, Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

KEY_BYTES = 16
IV_BYTES = 12
TAG_BYTES = 16
POINT_BYTES = 65  # uncompressed SEC1 P-256 point

DH_GROUP = "P-256"
_CURVE = ec.SECP256R1()
_CURVE_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551
_IV_COUNTER_LIMIT = 1 << 64


class CryptoError(Exception):
    """Base class for crypto failures."""


class AuthFailure(CryptoError):
    """Authentication failed. Deliberately carries no detail."""

    def __init__(self) -> None:
        super().__init__("authentication failed")


class IvExhausted(CryptoError):
    """The per-key IV counter ran out; the key must be rotated."""


class InvalidGroupElement(CryptoError):
    """A peer DH share is not a valid P-256 point."""


# --------------------------------------------------------------------------
# randomness


class Randomness(Protocol):
    def bytes(self, n: int) -> bytes: ...


class SystemRandom:
    """OS CSPRNG."""

    def bytes(self, n: int) -> bytes:
        return secrets.token_bytes(n)


class Drbg:
    """HMAC-SHA256 counter-mode generator.

    Used by the simulator so that a run is reproducible from its seed. The
    output is indistinguishable from random for anyone not holding ``seed``.
    """

    def __init__(self, seed: bytes, label: bytes = b"") -> None:
        self._key = hmac.new(seed, b"secgrid/drbg/" + label, hashlib.sha256).digest()
        self._counter = 0
        self._lock = threading.Lock()

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        with self._lock:
            while len(out) < n:
                out += hmac.new(self._key, struct.pack(">Q", self._counter), hashlib.sha256).digest()
                self._counter += 1
        return bytes(out[:n])

    def child(self, label: bytes) -> "Drbg":
        return Drbg(self.bytes(32), label)


def rand_u64(rng: Randomness) -> int:
    return int.from_bytes(rng.bytes(8), "big")


# --------------------------------------------------------------------------
# IV accounting

_iv_recorder: Optional[set] = None
_iv_recorder_lock = threading.Lock()


class IvReuse(AssertionError):
    pass


@contextmanager
def record_ivs() -> Iterator[set]:
    """Test hook: fail loudly on any (key, iv) pair used twice."""
    global _iv_recorder
    previous = _iv_recorder
    _iv_recorder = set()
    try:
        yield _iv_recorder
    finally:
        _iv_recorder = previous


def _note_iv(key: bytes, iv: bytes) -> None:
    rec = _iv_recorder
    if rec is None:
        return
    entry = (hashlib.sha256(key).digest(), iv)
    with _iv_recorder_lock:
        if entry in rec:
            raise IvReuse(f"IV {iv.hex()} reused")
        rec.add(entry)


class SymKey:
    """A 128-bit AES key plus the IV counter of the party holding it.

    IV layout is ``prefix(4) || counter(8)``. The prefix identifies one
    holder instance so that two parties sharing a key (or one enclave
    before and after a restart) never collide; the counter starts at 1.
    """

    __slots__ = ("material", "_prefix", "_next", "_lock", "_aead")

    def __init__(self, material: bytes, iv_prefix: Optional[bytes] = None, *, start: int = 1) -> None:
        if len(material) != KEY_BYTES:
            raise ValueError("SymKey must be exactly 16 bytes")
        if iv_prefix is None:
            iv_prefix = secrets.token_bytes(4)
        if len(iv_prefix) != 4:
            raise ValueError("IV prefix must be 4 bytes")
        if not 1 <= start <= _IV_COUNTER_LIMIT:
            raise ValueError("counter start out of range")
        self.material = bytes(material)
        self._prefix = bytes(iv_prefix)
        self._next = start
        self._lock = threading.Lock()
        self._aead: Optional[AESGCM] = None

    def aead(self) -> AESGCM:
        if self._aead is None:
            self._aead = AESGCM(self.material)
        return self._aead

    @classmethod
    def generate(cls, rng: Randomness, iv_prefix: Optional[bytes] = None) -> "SymKey":
        if iv_prefix is None:
            iv_prefix = rng.bytes(4)
        return cls(rng.bytes(KEY_BYTES), iv_prefix)

    def rebind(self, iv_prefix: bytes) -> "SymKey":
        """Same key material, fresh IV space owned by another holder."""
        return SymKey(self.material, iv_prefix)

    def next_iv(self) -> bytes:
        with self._lock:
            n = self._next
            if n >= _IV_COUNTER_LIMIT:
                raise IvExhausted("IV counter exhausted, rotate key")
            self._next = n + 1
        return self._prefix + n.to_bytes(8, "big")

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SymKey) and hmac.compare_digest(self.material, other.material)

    def __hash__(self) -> int:
        return hash(self.material)

    def __repr__(self) -> str:
        return "SymKey(<hidden>)"


# --------------------------------------------------------------------------
# authenticated encryption


@dataclass(frozen=True)
class CipherEnvelope:
    iv: bytes
    ciphertext: bytes
    tag: bytes
    aad: bytes = b""

    def encode(self) -> bytes:
        """iv(12) || ct_len(u32 BE) || ct || tag(16); aad travels out of band."""
        return self.iv + struct.pack(">I", len(self.ciphertext)) + self.ciphertext + self.tag

    @classmethod
    def decode(cls, data: bytes, aad: bytes = b"") -> tuple["CipherEnvelope", bytes]:
        """Parse one envelope from the front of ``data``; return (env, rest)."""
        if len(data) < IV_BYTES + 4 + TAG_BYTES:
            raise ValueError("truncated envelope")
        iv = data[:IV_BYTES]
        (ct_len,) = struct.unpack(">I", data[IV_BYTES:IV_BYTES + 4])
        start = IV_BYTES + 4
        end = start + ct_len
        if len(data) < end + TAG_BYTES:
            raise ValueError("truncated envelope")
        return cls(iv, data[start:end], data[end:end + TAG_BYTES], aad), data[end + TAG_BYTES:]


def gcm_seal(key: bytes, iv: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
    """Raw AES-GCM with caller-chosen IV. Returns (ciphertext, tag)."""
    out = AESGCM(key).encrypt(iv, plaintext, aad)
    return out[:-TAG_BYTES], out[-TAG_BYTES:]


def ae_encrypt(key: SymKey, plaintext: bytes, aad: bytes = b"") -> CipherEnvelope:
    iv = key.next_iv()
    _note_iv(key.material, iv)
    out = key.aead().encrypt(iv, plaintext, aad)
    return CipherEnvelope(iv, out[:-TAG_BYTES], out[-TAG_BYTES:], aad)


def ae_decrypt(key: SymKey, env: CipherEnvelope, aad: Optional[bytes] = None) -> bytes:
    """Open ``env``; ``aad`` overrides the envelope's own aad when given."""
    if aad is None:
        aad = env.aad
    if len(env.iv) != IV_BYTES or len(env.tag) != TAG_BYTES:
        raise AuthFailure()
    try:
        return key.aead().decrypt(env.iv, env.ciphertext + env.tag, aad)
    except InvalidTag:
        raise AuthFailure() from None


# --------------------------------------------------------------------------
# signatures

_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


def _scalar(rng: Randomness) -> int:
    # 64 extra bits make the modular bias negligible
    return int.from_bytes(rng.bytes(40), "big") % (_CURVE_ORDER - 1) + 1


@dataclass(frozen=True)
class SignKeypair:
    secret: ec.EllipticCurvePrivateKey
    public: bytes  # uncompressed SEC1 encoding

    @classmethod
    def generate(cls, rng: Randomness) -> "SignKeypair":
        sk = ec.derive_private_key(_scalar(rng), _CURVE)
        return cls(sk, encode_point(sk.public_key()))

    @classmethod
    def from_secret_bytes(cls, data: bytes) -> "SignKeypair":
        sk = ec.derive_private_key(int.from_bytes(data, "big"), _CURVE)
        return cls(sk, encode_point(sk.public_key()))

    def secret_bytes(self) -> bytes:
        return self.secret.private_numbers().private_value.to_bytes(32, "big")


def encode_point(pk: ec.EllipticCurvePublicKey) -> bytes:
    from cryptography.hazmat.primitives import serialization

    return pk.public_bytes(serialization.Encoding.X962, serialization.PublicFormat.UncompressedPoint)


def sign(sk: ec.EllipticCurvePrivateKey, message: bytes) -> bytes:
    return sk.sign(message, _ECDSA)


def verify(pk: bytes, message: bytes, sig: bytes) -> bool:
    """False on any failure, including malformed keys or signatures."""
    try:
        key = ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, pk)
        key.verify(sig, message, _ECDSA)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


# --------------------------------------------------------------------------
# Diffie-Hellman


@dataclass(frozen=True)
class DhSecret:
    key: ec.EllipticCurvePrivateKey

    def __repr__(self) -> str:
        return "DhSecret(<hidden>)"


def dh_generate(rng: Randomness) -> tuple[DhSecret, bytes]:
    sk = ec.derive_private_key(_scalar(rng), _CURVE)
    return DhSecret(sk), encode_point(sk.public_key())


def load_share(peer: bytes) -> ec.EllipticCurvePublicKey:
    if len(peer) != POINT_BYTES or peer[0] != 0x04:
        raise InvalidGroupElement("expected uncompressed P-256 point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(_CURVE, peer)
    except ValueError:
        raise InvalidGroupElement("point not on curve") from None


def dh_combine(secret: DhSecret, peer: bytes) -> bytes:
    """Shared secret: the 32-byte x-coordinate of secret * peer."""
    return secret.key.exchange(ec.ECDH(), load_share(peer))


def kdf_session(shared_secret: bytes, context: bytes, iv_prefix: Optional[bytes] = None) -> SymKey:
    material = HKDF(
        algorithm=hashes.SHA256(), length=KEY_BYTES, salt=b"secgrid/kdf/v1", info=context
    ).derive(shared_secret)
    return SymKey(material, iv_prefix)


# --------------------------------------------------------------------------
# public-key encryption (ECIES: ephemeral ECDH + HKDF + AES-GCM)


def pke_encrypt(pk: bytes, plaintext: bytes, rng: Randomness, aad: bytes = b"") -> bytes:
    eph, eph_pub = dh_generate(rng)
    shared = dh_combine(eph, pk)
    key = kdf_session(shared, b"secgrid/pke/" + eph_pub + pk, iv_prefix=b"\x00\x00\x00\x00")
    env = ae_encrypt(key, plaintext, aad)
    return eph_pub + env.encode()


def pke_decrypt(sk: DhSecret, pk: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    eph_pub, rest = blob[:POINT_BYTES], blob[POINT_BYTES:]
    try:
        shared = dh_combine(sk, eph_pub)
        env, tail = CipherEnvelope.decode(rest, aad)
    except (InvalidGroupElement, ValueError):
        raise AuthFailure() from None
    if tail:
        raise AuthFailure()
    key = kdf_session(shared, b"secgrid/pke/" + eph_pub + pk, iv_prefix=b"\x00\x00\x00\x00")
    return ae_decrypt(key, env, aad)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
