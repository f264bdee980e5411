"""Types shared by the protocol state machines."""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Optional, Protocol

from ..crypto import SymKey
from ..wire import NONCE_BYTES, WireError, lp, read_lp

NONCE_MOD = 1 << (8 * NONCE_BYTES)


class AlarmKind(enum.IntEnum):
    TAMPER = 1
    REPLAY = 2
    ROLLBACK = 3
    FRESHNESS = 4
    UNKNOWN = 5
    RESTORE = 6
    DOUBLE_REG = 7
    TIMEOUT = 8

    @property
    def label(self) -> str:
        return {
            AlarmKind.TAMPER: "Tamper",
            AlarmKind.REPLAY: "Replay",
            AlarmKind.ROLLBACK: "Rollback",
            AlarmKind.FRESHNESS: "Freshness",
            AlarmKind.UNKNOWN: "Unknown",
            AlarmKind.RESTORE: "Restore",
            AlarmKind.DOUBLE_REG: "DoubleReg",
            AlarmKind.TIMEOUT: "Timeout",
        }[self]


class ProtocolError(Exception):
    def __init__(self, kind: AlarmKind, detail: str = "", meter_id: Optional[int] = None) -> None:
        super().__init__(f"{kind.label}: {detail}")
        self.kind = kind
        self.detail = detail
        self.meter_id = meter_id


class Context(Protocol):
    """What a node may do while handling one event."""

    tick: int

    def send(self, dst: str, data: bytes) -> None: ...

    def set_timer(self, delay: int, token: tuple) -> None: ...

    def alarm(self, kind: AlarmKind, meter_id: Optional[int], detail: str = "") -> None: ...

    def note(self, kind: str, **fields) -> None: ...

    def observe(self, kind: str, **fields) -> None: ...

    def wall_time(self) -> int: ...

    def host_time(self) -> int: ...


@dataclass
class TimeRef:
    reference_wallclock: int
    counter_start: int

    def now(self, tick: int) -> int:
        return self.reference_wallclock + (tick - self.counter_start)


def nonce_plus_one(nonce: bytes) -> bytes:
    return ((int.from_bytes(nonce, "big") + 1) % NONCE_MOD).to_bytes(NONCE_BYTES, "big")


@dataclass
class MeterSession:
    """Per-meter state of the gateway enclave. Persisted only sealed."""

    key: SymKey
    ctr_old: int = 0
    nonce_expected: bytes = b"\x00" * NONCE_BYTES
    last_response: bytes = b""

    def encode(self) -> bytes:
        return (
            self.key.material
            + struct.pack(">Q", self.ctr_old)
            + self.nonce_expected
            + lp(self.last_response)
        )

    @classmethod
    def decode(cls, data: bytes, iv_prefix: bytes) -> "MeterSession":
        if len(data) < 16 + 8 + NONCE_BYTES + 2:
            raise WireError("truncated session")
        key = SymKey(data[:16], iv_prefix)
        (ctr,) = struct.unpack(">Q", data[16:24])
        nonce = data[24:24 + NONCE_BYTES]
        resp, end = read_lp(data, 24 + NONCE_BYTES)
        if end != len(data):
            raise WireError("trailing bytes in session")
        return cls(key, ctr, nonce, resp)


@dataclass(frozen=True)
class Schedule:
    """Public timing of report periods, in ticks (1 tick = 1 s)."""

    first_period_tick: int = 900
    interval: int = 900
    periods: int = 10
    window_close: int = 600

    def period_start(self, p: int) -> int:
        return self.first_period_tick + (p - 1) * self.interval

    def window_close_tick(self, p: int) -> int:
        return self.period_start(p) + self.window_close


@dataclass(frozen=True)
class Timeouts:
    retransmit: int = 30
    max_retries: int = 4
    protocol: int = 60
    time_tolerance: int = 5


@dataclass
class Identities:
    """Code identities and the attestation root everyone pins."""

    gateway: str = "secgrid-gateway-enclave/v1"
    control: str = "secgrid-control-enclave/v1"
    attestation_root: bytes = b""
    extra: dict = field(default_factory=dict)
