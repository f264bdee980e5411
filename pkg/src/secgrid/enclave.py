"""Software stand-in for SGX enclaves.

An :class:`Enclave` has a measurement derived from its code identity, a
seal key derived from the machine's root seal secret and that measurement,
and a private memory dict that only the enclave program touches. Quotes are
signed by a local :class:`AttestationService` whose public key plays the
role of the attestation root.

Untrusted persistence lives in :class:`VersionedStore`, which keeps every
version ever written so the adversary harness can serve stale ones.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Optional

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import crypto
from .crypto import AuthFailure, CipherEnvelope, Randomness, SignKeypair, SymKey


class NotFound(KeyError):
    pass


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    @classmethod
    def of(cls, code_identity: str) -> "Measurement":
        return cls(crypto.sha256(code_identity.encode("utf-8")))

    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class Quote:
    measurement: Measurement
    user_data: bytes
    attestation_sig: bytes

    def signed_bytes(self) -> bytes:
        return _quote_body(self.measurement, self.user_data)

    def encode(self) -> bytes:
        return (
            self.measurement.digest
            + struct.pack(">H", len(self.user_data))
            + self.user_data
            + struct.pack(">B", len(self.attestation_sig))
            + self.attestation_sig
        )

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        if len(data) < 35:
            raise ValueError("truncated quote")
        m = Measurement(data[:32])
        (ulen,) = struct.unpack(">H", data[32:34])
        user = data[34:34 + ulen]
        pos = 34 + ulen
        if len(user) != ulen or len(data) < pos + 1:
            raise ValueError("truncated quote")
        slen = data[pos]
        sig = data[pos + 1:pos + 1 + slen]
        if len(sig) != slen or len(data) != pos + 1 + slen:
            raise ValueError("malformed quote")
        return cls(m, user, sig)


def _quote_body(m: Measurement, user_data: bytes) -> bytes:
    return b"secgrid/quote/v1" + m.digest + struct.pack(">H", len(user_data)) + user_data


class AttestationService:
    """Local signer standing in for the vendor attestation infrastructure."""

    def __init__(self, rng: Randomness) -> None:
        self._root = SignKeypair.generate(rng)

    @property
    def root_public_key(self) -> bytes:
        return self._root.public

    def issue(self, measurement: Measurement, user_data: bytes) -> Quote:
        sig = crypto.sign(self._root.secret, _quote_body(measurement, user_data))
        return Quote(measurement, user_data, sig)


def verify_quote(q: Quote, expected: Measurement, attn_root_pk: bytes) -> bool:
    if q.measurement != expected:
        return False
    return crypto.verify(attn_root_pk, q.signed_bytes(), q.attestation_sig)


@dataclass(frozen=True)
class SealedRecord:
    label: bytes
    envelope: CipherEnvelope

    def encode(self) -> bytes:
        return struct.pack(">H", len(self.label)) + self.label + self.envelope.encode()

    @classmethod
    def decode(cls, data: bytes) -> "SealedRecord":
        if len(data) < 2:
            raise ValueError("truncated sealed record")
        (llen,) = struct.unpack(">H", data[:2])
        label = data[2:2 + llen]
        if len(label) != llen:
            raise ValueError("truncated sealed record")
        env, rest = CipherEnvelope.decode(data[2 + llen:], label)
        if rest:
            raise ValueError("trailing bytes after sealed record")
        return cls(label, env)


class Enclave:
    """One running enclave instance.

    ``memory`` is the in-enclave state. Host-side code must only ever hold
    the enclave program object, never this handle.
    """

    def __init__(
        self,
        code_identity: str,
        root_seal_secret: bytes,
        attestation: Optional[AttestationService] = None,
        rng: Optional[Randomness] = None,
    ) -> None:
        self.code_identity = code_identity
        self.measurement = Measurement.of(code_identity)
        self.rng: Randomness = rng or crypto.SystemRandom()
        material = HKDF(
            algorithm=hashes.SHA256(),
            length=crypto.KEY_BYTES,
            salt=b"secgrid/sealkey/v1",
            info=self.measurement.digest,
        ).derive(root_seal_secret)
        self._seal_key = SymKey(material, self.rng.bytes(4))
        self._attestation = attestation
        self.memory: dict = {}
        self.lock = threading.RLock()
        self.alive = True

    def seal_key_fingerprint(self) -> bytes:
        """Hash of the seal key, for tests comparing two enclaves."""
        return crypto.sha256(b"fp" + self._seal_key.material)

    def destroy(self) -> None:
        self.memory.clear()
        self.alive = False


def create_enclave(
    code_identity: str,
    root_seal_secret: bytes,
    attestation: Optional[AttestationService] = None,
    rng: Optional[Randomness] = None,
) -> Enclave:
    return Enclave(code_identity, root_seal_secret, attestation, rng)


def get_quote(e: Enclave, user_data: bytes) -> Quote:
    if e._attestation is None:
        raise RuntimeError("enclave has no attestation service")
    return e._attestation.issue(e.measurement, user_data)


def _as_label(label: str | bytes) -> bytes:
    return label.encode("utf-8") if isinstance(label, str) else bytes(label)


def seal(e: Enclave, label: str | bytes, plaintext: bytes) -> SealedRecord:
    lb = _as_label(label)
    return SealedRecord(lb, crypto.ae_encrypt(e._seal_key, plaintext, lb))


def unseal(e: Enclave, rec: SealedRecord) -> bytes:
    return crypto.ae_decrypt(e._seal_key, rec.envelope, rec.label)


@dataclass
class _Slot:
    history: list = field(default_factory=list)
    current: int = 0  # 1-based index into history; 0 means nothing served


class VersionedStore:
    """Untrusted label -> bytes store that never forgets old versions."""

    def __init__(self) -> None:
        self._slots: dict[str, _Slot] = {}
        self._lock = threading.Lock()

    def put(self, label: str, data: bytes) -> int:
        with self._lock:
            slot = self._slots.setdefault(label, _Slot())
            slot.history.append(bytes(data))
            slot.current = len(slot.history)
            return slot.current

    def get(self, label: str) -> bytes:
        with self._lock:
            slot = self._slots.get(label)
            if slot is None or slot.current == 0:
                raise NotFound(label)
            return slot.history[slot.current - 1]

    def version(self, label: str) -> int:
        with self._lock:
            slot = self._slots.get(label)
            return 0 if slot is None else slot.current

    def history(self, label: str) -> list[bytes]:
        with self._lock:
            slot = self._slots.get(label)
            return list(slot.history) if slot else []

    def labels(self) -> list[str]:
        with self._lock:
            return sorted(k for k, s in self._slots.items() if s.current)

    def rollback(self, label: str, to_version: int) -> None:
        """Adversary action: serve an older version as the current one."""
        with self._lock:
            slot = self._slots.get(label)
            if slot is None or not 1 <= to_version <= len(slot.history):
                raise NotFound(f"{label} v{to_version}")
            slot.current = to_version

    def wipe(self, label: Optional[str] = None) -> None:
        with self._lock:
            if label is None:
                self._slots.clear()
            else:
                self._slots.pop(label, None)

    def all_bytes(self) -> list[bytes]:
        with self._lock:
            return [b for s in self._slots.values() for b in s.history]


def enclave_store(store: VersionedStore, rec: SealedRecord) -> int:
    return store.put(rec.label.decode("utf-8"), rec.encode())


def enclave_load(store: VersionedStore, label: str) -> SealedRecord:
    return SealedRecord.decode(store.get(label))


__all__ = [
    "AttestationService",
    "AuthFailure",
    "Enclave",
    "Measurement",
    "NotFound",
    "Quote",
    "SealedRecord",
    "VersionedStore",
    "create_enclave",
    "enclave_load",
    "enclave_store",
    "get_quote",
    "seal",
    "unseal",
    "verify_quote",
]
