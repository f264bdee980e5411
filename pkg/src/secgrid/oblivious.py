"""Branchless 64-bit primitives and an access-trace recorder.

Every primitive reports an event (operation kind plus operand shape, never
operand values) to the active recorder, if any. A function built only from
these primitives and public-index reads produces a trace that depends on
input shapes alone, which is what the obliviousness tests compare.
"""
from __future__ import annotations

import json
from array import array
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

WORD = 64
M64 = (1 << WORD) - 1

_trace: ContextVar[Optional[list]] = ContextVar("secgrid_trace", default=None)


def emit(kind: str, *shape: int) -> None:
    t = _trace.get()
    if t is not None:
        t.append((kind, *shape))


_MASK_TOKEN = object()


class Mask:
    """All-ones or all-zeros word. Only comparisons in this module make one."""

    __slots__ = ("_v",)

    def __init__(self, value: int, _token: object = None) -> None:
        if _token is not _MASK_TOKEN:
            raise TypeError("Mask values come from oblivious comparisons only")
        self._v = value

    @property
    def value(self) -> int:
        return self._v

    def __repr__(self) -> str:
        return "Mask(<secret>)"


def _mask(bit: int) -> Mask:
    return Mask((-bit) & M64, _MASK_TOKEN)


def o_greater(a: int, b: int) -> Mask:
    """All-ones iff a > b, via the borrow of b - a."""
    emit("o_greater", WORD)
    a &= M64
    b &= M64
    return _mask(((b - a) >> WORD) & 1)


def o_equal(a: int, b: int) -> Mask:
    emit("o_equal", WORD)
    x = (a ^ b) & M64
    nonzero = ((x | (-x & M64)) >> (WORD - 1)) & 1
    return _mask(nonzero ^ 1)


def o_not(m: Mask) -> Mask:
    emit("o_not", WORD)
    return Mask(~m._v & M64, _MASK_TOKEN)


def o_move(m: Mask, on_true: int, on_false: int) -> int:
    """on_true if m is all-ones else on_false, as (m & x) | (~m & y)."""
    if not isinstance(m, Mask):
        raise TypeError("o_move needs a Mask")
    emit("o_move", WORD)
    v = m._v
    return (v & on_true & M64) | (~v & on_false & M64)


def o_add(a: int, b: int) -> tuple[int, int]:
    """Wrapping add; returns (sum mod 2^64, carry bit)."""
    emit("o_add", WORD)
    s = (a & M64) + (b & M64)
    return s & M64, s >> WORD


def o_mul(a: int, b: int) -> tuple[int, int]:
    """Wrapping multiply; returns (low word, 1 if the product overflowed)."""
    emit("o_mul", WORD)
    p = (a & M64) * (b & M64)
    hi = p >> WORD
    return p & M64, ((hi | -hi) >> (2 * WORD)) & 1


def oread(seq: Sequence[int], index: int) -> int:
    """Read at a public index; the index is part of the trace."""
    emit("read", len(seq), index)
    return seq[index]


def o_select_index(i_secret: int, table: Sequence[int]) -> int:
    """table[i_secret] by touching every entry once; 0 when out of range."""
    if not table:
        raise ValueError("empty table")
    acc = 0
    for j in range(len(table)):
        acc = o_move(o_equal(i_secret, j), oread(table, j), acc)
    return acc


# --------------------------------------------------------------------------
# vector forms: one event per call, the same element-wise work for every lane

U64 = np.uint64
_SHIFT = U64(WORD - 1)
_LOW32 = U64(0xFFFFFFFF)


class MaskVec:
    """A vector of Masks, one all-ones or all-zeros word per lane."""

    __slots__ = ("_v",)

    def __init__(self, value: np.ndarray, _token: object = None) -> None:
        if _token is not _MASK_TOKEN:
            raise TypeError("MaskVec values come from oblivious comparisons only")
        self._v = value

    def __len__(self) -> int:
        return len(self._v)

    def __repr__(self) -> str:
        return f"MaskVec(<secret> x{len(self._v)})"


def as_words(values: Iterable[int]) -> np.ndarray:
    """Load values into a uint64 vector; touches every index in order."""
    if isinstance(values, np.ndarray):
        words = values.astype(U64, copy=False)
    else:
        words = np.frombuffer(array("Q", values), dtype=U64)
    emit("read_all", words.size)
    return words


def o_greater_vec(a: np.ndarray, b) -> MaskVec:
    """Lane-wise a > b from the borrow bit of b - a."""
    a = np.asarray(a, dtype=U64)
    b = np.broadcast_to(np.asarray(b, dtype=U64), a.shape)
    emit("o_greater_vec", WORD, a.size)
    diff = b - a
    borrow = ((~b & a) | (~(b ^ a) & diff)) >> _SHIFT
    return MaskVec(U64(0) - borrow, _MASK_TOKEN)


def o_move_vec(m: MaskVec, on_true, on_false) -> np.ndarray:
    if not isinstance(m, MaskVec):
        raise TypeError("o_move_vec needs a MaskVec")
    emit("o_move_vec", WORD, len(m))
    t = np.asarray(on_true, dtype=U64)
    f = np.asarray(on_false, dtype=U64)
    return (m._v & t) | (~m._v & f)


def o_sum(words: np.ndarray) -> tuple[int, int]:
    """Sum of a uint64 vector as (sum mod 2^64, 1 if it overflowed).

    The halves are summed separately so no lane-level wrap can hide an
    overflow for up to 2^32 lanes.
    """
    emit("o_sum", WORD, words.size)
    lo = int(np.sum(words & _LOW32, dtype=U64))
    hi = int(np.sum(words >> U64(32), dtype=U64))
    total = (hi << 32) + lo
    over = total >> WORD  # < 2^33
    return total & M64, ((over | -over) >> WORD) & 1


@dataclass(frozen=True)
class AccessTrace:
    events: tuple

    def to_bytes(self) -> bytes:
        return json.dumps(self.events, separators=(",", ":")).encode()

    def __len__(self) -> int:
        return len(self.events)


@contextmanager
def recording() -> Iterator[list]:
    events: list = []
    token = _trace.set(events)
    try:
        yield events
    finally:
        _trace.reset(token)


def record_trace(f: Callable[..., Any], *args: Any, **kwargs: Any) -> AccessTrace:
    with recording() as events:
        f(*args, **kwargs)
    return AccessTrace(tuple(events))
