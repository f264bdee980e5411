"""Paillier baseline for the benchmarks, on top of python-paillier.

python-paillier uses g = n + 1 and gmpy2 when it is installed. Plaintexts
here are non-negative integers below n; python-paillier's own encoding
reserves the top two thirds of Z_n for negatives and overflow detection,
so the usable range is [0, n // 3).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from operator import add
from typing import Iterable

from phe import paillier
from phe.paillier import EncryptedNumber, PaillierPrivateKey, PaillierPublicKey

DEFAULT_BITS = 2048


class PaillierError(ValueError):
    pass


@dataclass(frozen=True)
class PaillierKeypair:
    public: PaillierPublicKey
    private: PaillierPrivateKey

    @property
    def n(self) -> int:
        return self.public.n


def keygen(bits: int = DEFAULT_BITS) -> PaillierKeypair:
    pk, sk = paillier.generate_paillier_keypair(n_length=bits)
    return PaillierKeypair(pk, sk)


def _check(pk: PaillierPublicKey, m: int) -> int:
    if not isinstance(m, int) or isinstance(m, bool):
        raise PaillierError("plaintext must be an int")
    if not 0 <= m <= pk.max_int:
        raise PaillierError("plaintext outside [0, n // 3)")
    return m


def encrypt(pk: PaillierPublicKey, m: int) -> EncryptedNumber:
    return pk.encrypt(_check(pk, m))


def add_ct(a: EncryptedNumber, b: EncryptedNumber) -> EncryptedNumber:
    """Enc(m1) * Enc(m2) mod n^2."""
    return a + b


def sum_ct(cts: Iterable[EncryptedNumber], pk: PaillierPublicKey) -> EncryptedNumber:
    # Start from the raw ciphertext 1 (Enc(0) with r = 1) so nothing is re-obfuscated.
    return reduce(add, cts, EncryptedNumber(pk, 1, 0))


def mul_scalar(c: EncryptedNumber, k: int) -> EncryptedNumber:
    """Enc(m)^k mod n^2, which decrypts to k * m."""
    return c * _check(c.public_key, k)


def decrypt(sk: PaillierPrivateKey, c: EncryptedNumber) -> int:
    m = sk.decrypt(c)
    if not isinstance(m, int) or m < 0:
        raise PaillierError("result left the non-negative integer range")
    return m
