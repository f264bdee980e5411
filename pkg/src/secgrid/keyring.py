"""Merkle-authenticated store of smart-meter initialization keys.

Leaves live in untrusted storage; the control enclave keeps only the root
and the leaf count. Every read is checked against the root, and voiding a
key rewrites the leaf and the root together. Leaves are sorted by meter id
so that "not found" is also proven, by a verified binary search.

Tree format:
    leaf  = H(0x00 || meter_id u64 BE || status u8 || H(init_key))
    inner = H(0x01 || left || right)
    an odd node at any level is paired with itself
    empty tree root = H("")
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import crypto
from .crypto import SymKey
from .enclave import Enclave, NotFound, SealedRecord, VersionedStore, seal, unseal

EMPTY_ROOT = crypto.sha256(b"")
_LEAF_PREFIX = "keyring/"


class Status(enum.IntEnum):
    ACTIVE = 0
    VOID = 1


class KeyringError(Exception):
    pass


class KeyNotFound(KeyringError):
    pass


class AlreadyVoid(KeyringError):
    pass


class IntegrityError(KeyringError):
    """Untrusted storage served something the root does not commit to."""


class DuplicateMeter(KeyringError, ValueError):
    pass


def leaf_hash(meter_id: int, status: int, init_key: bytes) -> bytes:
    return crypto.sha256(b"\x00" + struct.pack(">QB", meter_id, status) + crypto.sha256(init_key))


def inner_hash(left: bytes, right: bytes) -> bytes:
    return crypto.sha256(b"\x01" + left + right)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        return EMPTY_ROOT
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [inner_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def audit_path(leaves: Sequence[bytes], index: int) -> list[bytes]:
    if not 0 <= index < len(leaves):
        raise IndexError(index)
    path = []
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        path.append(level[index ^ 1])
        level = [inner_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
        index //= 2
    return path


def tree_depth(n: int) -> int:
    return max(n - 1, 0).bit_length()


def root_from_path(leaf: bytes, index: int, path: Sequence[bytes], size: int) -> bytes:
    """Fold a leaf up its audit path in a tree of ``size`` leaves.

    Where the node is the unpaired last one of its level, its sibling is
    itself, so the path entry is ignored. Without this an update to the last
    leaf would fold in its own stale hash.
    """
    h = leaf
    width = size
    for sib in path:
        if width % 2 and index == width - 1:
            sib = h
        h = inner_hash(sib, h) if index & 1 else inner_hash(h, sib)
        index >>= 1
        width = (width + 1) // 2
    return h


def verify_leaf_proof(root: bytes, leaf: bytes, index: int, path: Sequence[bytes], size: int) -> bool:
    if not 0 <= index < size or len(path) != tree_depth(size):
        return False
    return root_from_path(leaf, index, path, size) == root


# --------------------------------------------------------------------------
# untrusted side


def encode_leaf(meter_id: int, status: int, sealed_key: SealedRecord) -> bytes:
    return struct.pack(">QB", meter_id, status) + sealed_key.encode()


def decode_leaf(data: bytes) -> tuple[int, int, SealedRecord]:
    if len(data) < 9:
        raise ValueError("truncated leaf")
    meter_id, status = struct.unpack(">QB", data[:9])
    return meter_id, status, SealedRecord.decode(data[9:])


class LeafStorage:
    """Host-side leaf storage. Holds public leaf hashes to build paths."""

    def __init__(self, store: VersionedStore) -> None:
        self.store = store

    @staticmethod
    def label(index: int) -> str:
        return f"{_LEAF_PREFIX}{index:06d}"

    def write(self, index: int, leaf: bytes, digest: bytes) -> None:
        self.store.put(self.label(index), digest + leaf)

    def _hashes(self) -> list[bytes]:
        out = []
        i = 0
        while True:
            try:
                out.append(self.store.get(self.label(i))[:32])
            except NotFound:
                return out
            i += 1

    def read(self, index: int) -> tuple[bytes, list[bytes]]:
        raw = self.store.get(self.label(index))
        hashes = self._hashes()
        return raw[32:], audit_path(hashes, index)


# --------------------------------------------------------------------------
# enclave side


@dataclass
class _Probe:
    index: int
    meter_id: int
    status: int
    key: bytes
    path: list


class MerkleKeyStore:
    """Control-enclave view of the keyring: root and size are the only trusted state."""

    def __init__(self, enclave: Enclave, storage: LeafStorage, root: bytes, size: int) -> None:
        self._enclave = enclave
        self.storage = storage
        self._root = root
        self._size = size

    @property
    def root(self) -> bytes:
        return self._root

    @property
    def size(self) -> int:
        return self._size

    def _probe(self, index: int) -> _Probe:
        try:
            leaf, path = self.storage.read(index)
            meter_id, status, sealed = decode_leaf(leaf)
            key = unseal(self._enclave, sealed)
        except (NotFound, ValueError, IndexError, crypto.AuthFailure):
            raise IntegrityError(f"leaf {index} unreadable") from None
        if sealed.label != f"{_LEAF_PREFIX}{meter_id}".encode() or status not in (0, 1):
            raise IntegrityError(f"leaf {index} malformed")
        if len(path) != tree_depth(self._size):
            raise IntegrityError(f"leaf {index} path length")
        if not verify_leaf_proof(self._root, leaf_hash(meter_id, status, key), index, path, self._size):
            raise IntegrityError(f"leaf {index} proof failed")
        return _Probe(index, meter_id, status, key, path)

    def _find(self, meter_id: int) -> _Probe:
        lo, hi = 0, self._size
        while lo < hi:
            mid = (lo + hi) // 2
            p = self._probe(mid)
            if p.meter_id == meter_id:
                return p
            if p.meter_id < meter_id:
                lo = mid + 1
            else:
                hi = mid
        raise KeyNotFound(meter_id)

    def status(self, meter_id: int) -> Status:
        return Status(self._find(meter_id).status)

    def get_and_void(self, meter_id: int) -> SymKey:
        p = self._find(meter_id)
        if p.status != Status.ACTIVE:
            raise AlreadyVoid(meter_id)
        new_leaf = leaf_hash(meter_id, Status.VOID, p.key)
        new_root = root_from_path(new_leaf, p.index, p.path, self._size)
        sealed = seal(self._enclave, f"{_LEAF_PREFIX}{meter_id}", p.key)
        self.storage.write(p.index, encode_leaf(meter_id, Status.VOID, sealed), new_leaf)
        self._root = new_root
        return SymKey(p.key, self._enclave.rng.bytes(4))


def build_store(
    records: Iterable[tuple[int, bytes]], enclave: Enclave, storage: LeafStorage
) -> MerkleKeyStore:
    recs = sorted(records, key=lambda r: r[0])
    ids = [r[0] for r in recs]
    if len(set(ids)) != len(ids):
        raise DuplicateMeter("duplicate meter id")
    hashes = []
    for index, (meter_id, key) in enumerate(recs):
        key = key.material if isinstance(key, SymKey) else key
        digest = leaf_hash(meter_id, Status.ACTIVE, key)
        sealed = seal(enclave, f"{_LEAF_PREFIX}{meter_id}", key)
        storage.write(index, encode_leaf(meter_id, Status.ACTIVE, sealed), digest)
        hashes.append(digest)
    return MerkleKeyStore(enclave, storage, merkle_root(hashes), len(recs))
