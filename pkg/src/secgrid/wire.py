"""Byte-level message formats.

Every network message is ``type(u8) || body``. Integers are big-endian.
Envelopes embedded in bodies use ``iv(12) || ct_len(u32) || ct || tag(16)``
unless a fixed layout is given (reports).

Report (tag 0x20, also used by RESEND 0x41):
    meter_id u64 || iv(12) || ct(40) || tag(16)
    plaintext = meter_id u64 || reading u64 || nonce(16) || ctr u64
    aad       = "secgrid/report/v1"

Function outputs sent to the control center are TLV records
``tag(u8) || len(u16) || value``.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .crypto import IV_BYTES, TAG_BYTES, CipherEnvelope


class WireError(ValueError):
    pass


class MsgType(enum.IntEnum):
    ATTEST_GW = 0x01       # GE -> CE  quote(pk_sign || pk_kem || g^a)
    ATTEST_CC = 0x02       # CE -> GE  quote(pk_cc || g^b || time)
    TIME_CONFIRM = 0x03    # GE -> CE  env(time) || sig_gw
    INIT_ACK = 0x04        # CE -> GE  env("ack") || sig_cc
    ATTEST_REQ = 0x10      # UD -> GE  challenge(16)
    ATTEST_RESP = 0x11     # GE -> UD  quote(pk_sign || pk_kem || challenge)
    INIT = 0x12            # SM -> UD  meter_id || env_Kinit(meter_id || K_i)
    INIT_PRIME = 0x13      # UD -> GE  pke(Init)
    GET_INIT_KEY = 0x14    # GE -> CE  env_s(meter_id)
    INIT_KEY = 0x15        # CE -> GE  env_s(meter_id || status || K_init)
    DONE = 0x16            # GE -> UD  meter_id || challenge || sig_gw
    ECHO = 0x17            # GE -> SM  meter_id || env_Ki(nonce || time)
    SM_ACK = 0x18          # SM -> GE  meter_id || env_Ki(nonce + 1)
    INIT_TRIGGER = 0x19    # UD -> SM  pk_sign of the attested gateway (local link)
    REPORT = 0x20          # SM -> GE  fixed report layout
    REPORT_RESP = 0x21     # GE -> SM  meter_id || env_Ki(ctr || next nonce)
    WINDOW = 0x30          # GE -> CE  env_s(seq || TLV*)
    WINDOW_ACK = 0x31      # CE -> GE  env_s(seq)
    RESTART_REQ = 0x40     # GE -> SM  meter_id || env_Ki(nonce)
    RESEND = 0x41          # SM -> GE  fixed report layout
    TIME_REQ = 0x42        # GE -> CE  env_s(challenge)
    TIME_RESP = 0x43       # CE -> GE  env_s(challenge || time)
    PRICE_BCAST = 0x50     # GE -> SM  day || 24 x (a_hat, b_hat) || sig_gw


REPORT_AAD = b"secgrid/report/v1"
REPORT_PLAIN_LEN = 40
REPORT_WIRE_LEN = 8 + IV_BYTES + REPORT_PLAIN_LEN + TAG_BYTES
NONCE_BYTES = 16


def aad_for(kind: MsgType, meter_id: int | None = None) -> bytes:
    base = b"secgrid/" + kind.name.lower().encode() + b"/v1"
    return base if meter_id is None else base + struct.pack(">Q", meter_id)


def frame(kind: MsgType, body: bytes) -> bytes:
    return bytes([kind]) + body


def unframe(data: bytes) -> tuple[MsgType, bytes]:
    if not data:
        raise WireError("empty message")
    try:
        kind = MsgType(data[0])
    except ValueError:
        raise WireError(f"unknown type 0x{data[0]:02x}") from None
    return kind, data[1:]


def peek_type(data: bytes) -> int | None:
    return data[0] if data else None


@dataclass(frozen=True)
class ReportPlain:
    meter_id: int
    reading: int
    nonce: bytes
    ctr: int

    def encode(self) -> bytes:
        if len(self.nonce) != NONCE_BYTES:
            raise WireError("nonce must be 16 bytes")
        return struct.pack(">QQ", self.meter_id, self.reading) + self.nonce + struct.pack(">Q", self.ctr)

    @classmethod
    def decode(cls, data: bytes) -> "ReportPlain":
        if len(data) != REPORT_PLAIN_LEN:
            raise WireError("report plaintext must be 40 bytes")
        meter_id, reading = struct.unpack(">QQ", data[:16])
        (ctr,) = struct.unpack(">Q", data[32:])
        return cls(meter_id, reading, data[16:32], ctr)


@dataclass(frozen=True)
class Report:
    meter_id_clear: int
    envelope: CipherEnvelope

    def encode(self) -> bytes:
        env = self.envelope
        if len(env.ciphertext) != REPORT_PLAIN_LEN:
            raise WireError("report ciphertext must be 40 bytes")
        return struct.pack(">Q", self.meter_id_clear) + env.iv + env.ciphertext + env.tag

    @classmethod
    def decode(cls, body: bytes) -> "Report":
        if len(body) != REPORT_WIRE_LEN:
            raise WireError("report must be 76 bytes")
        (mid,) = struct.unpack(">Q", body[:8])
        iv = body[8:20]
        ct = body[20:60]
        tag = body[60:]
        return cls(mid, CipherEnvelope(iv, ct, tag, REPORT_AAD))


# --------------------------------------------------------------------------
# small body helpers


def u64(x: int) -> bytes:
    return struct.pack(">Q", x)


def read_u64(data: bytes, pos: int = 0) -> int:
    if len(data) < pos + 8:
        raise WireError("truncated integer")
    return struct.unpack(">Q", data[pos:pos + 8])[0]


def lp(data: bytes) -> bytes:
    """u16 length prefix."""
    return struct.pack(">H", len(data)) + data


def read_lp(data: bytes, pos: int = 0) -> tuple[bytes, int]:
    if len(data) < pos + 2:
        raise WireError("truncated length prefix")
    (n,) = struct.unpack(">H", data[pos:pos + 2])
    chunk = data[pos + 2:pos + 2 + n]
    if len(chunk) != n:
        raise WireError("truncated field")
    return chunk, pos + 2 + n


def id_env(meter_id: int, env: CipherEnvelope) -> bytes:
    return u64(meter_id) + env.encode()


def read_id_env(body: bytes, aad: bytes) -> tuple[int, CipherEnvelope]:
    mid = read_u64(body)
    env, rest = decode_env(body[8:], aad)
    if rest:
        raise WireError("trailing bytes")
    return mid, env


def decode_env(data: bytes, aad: bytes) -> tuple[CipherEnvelope, bytes]:
    try:
        return CipherEnvelope.decode(data, aad)
    except ValueError as e:
        raise WireError(str(e)) from None


def decode_only_env(data: bytes, aad: bytes) -> CipherEnvelope:
    env, rest = decode_env(data, aad)
    if rest:
        raise WireError("trailing bytes")
    return env


# --------------------------------------------------------------------------
# function-output records


class Tlv(enum.IntEnum):
    AGG = 1
    PRICE = 2
    FORECAST = 3
    BILL = 4
    ALARM = 5


def tlv(tag: Tlv, value: bytes) -> bytes:
    return struct.pack(">BH", tag, len(value)) + value


def parse_tlvs(data: bytes) -> list[tuple[Tlv, bytes]]:
    out = []
    pos = 0
    while pos < len(data):
        if len(data) < pos + 3:
            raise WireError("truncated TLV header")
        tag, n = struct.unpack(">BH", data[pos:pos + 3])
        value = data[pos + 3:pos + 3 + n]
        if len(value) != n:
            raise WireError("truncated TLV value")
        try:
            out.append((Tlv(tag), value))
        except ValueError:
            raise WireError(f"unknown TLV tag {tag}") from None
        pos += 3 + n
    return out


def agg_record(period: int, total: int) -> bytes:
    return tlv(Tlv.AGG, struct.pack(">IQ", period, total))


def price_record(period: int, price: int) -> bytes:
    return tlv(Tlv.PRICE, struct.pack(">IQ", period, price))


def forecast_record(period: int, load_mwh: int) -> bytes:
    return tlv(Tlv.FORECAST, struct.pack(">Iq", period, load_mwh))


def bill_record(meter_id: int, hour: int, amount: int) -> bytes:
    return tlv(Tlv.BILL, struct.pack(">QIQ", meter_id, hour, amount))


def alarm_record(kind_code: int, meter_id: int | None, tick: int) -> bytes:
    mid = 0xFFFFFFFFFFFFFFFF if meter_id is None else meter_id
    return tlv(Tlv.ALARM, struct.pack(">BQQ", kind_code, mid, tick))


def decode_record(tag: Tlv, value: bytes) -> dict:
    if tag is Tlv.AGG:
        period, total = struct.unpack(">IQ", value)
        return {"type": "agg", "period": period, "total": total}
    if tag is Tlv.PRICE:
        period, price = struct.unpack(">IQ", value)
        return {"type": "price", "period": period, "price": price}
    if tag is Tlv.FORECAST:
        period, load = struct.unpack(">Iq", value)
        return {"type": "forecast", "period": period, "load_mwh": load}
    if tag is Tlv.BILL:
        mid, hour, amount = struct.unpack(">QIQ", value)
        return {"type": "bill", "meter_id": mid, "hour": hour, "amount": amount}
    code, mid, tick = struct.unpack(">BQQ", value)
    return {
        "type": "alarm",
        "kind_code": code,
        "meter_id": None if mid == 0xFFFFFFFFFFFFFFFF else mid,
        "raised_at": tick,
    }
