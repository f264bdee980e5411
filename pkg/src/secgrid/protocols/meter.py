"""Smart meter and user device state machines.

Neither runs an enclave. The meter holds its initialization key from
manufacture, picks its own session key during registration and reports
once per period. The user device only relays the registration and checks
the gateway's attestation on the user's behalf.
"""
from __future__ import annotations

import hmac
import struct
from typing import Callable, Optional

from .. import crypto, wire
from ..crypto import AuthFailure, SymKey
from ..enclave import Measurement, Quote, verify_quote
from ..wire import MsgType, Report, ReportPlain, WireError
from .common import AlarmKind, Context, Identities, Schedule, Timeouts, nonce_plus_one

GW = "gw"


def ud_name(meter_id: int) -> str:
    return f"ud/{meter_id}"


class SmartMeter:
    def __init__(
        self,
        meter_id: int,
        init_key: bytes,
        readings: Callable[[int, int], int],
        rng: crypto.Randomness,
        schedule: Schedule,
        timeouts: Timeouts = Timeouts(),
    ) -> None:
        self.meter_id = meter_id
        self.name = f"sm/{meter_id}"
        self._init_key = SymKey(init_key, rng.bytes(4))
        self._readings = readings
        self._rng = rng
        self._sched = schedule
        self._t = timeouts
        self.key: Optional[SymKey] = None
        self._candidate: Optional[SymKey] = None
        self.gw_public: Optional[bytes] = None
        self.registered = False
        self.ctr = 0
        self.nonce: Optional[bytes] = None
        self.time_offset: Optional[int] = None
        self.latest: Optional[tuple[int, int]] = None  # (ctr, reading) of the newest report
        self.awaiting = False
        self._outstanding: Optional[bytes] = None
        self._attempt = 0
        self.prices: dict[int, list[tuple[int, int]]] = {}

    # -- registration ---------------------------------------------------------

    def _on_trigger(self, src: str, body: bytes, ctx: Context) -> None:
        # A registered meter may be asked again (reinstall, or an attacker
        # replaying the flow). It offers a fresh candidate key and keeps its
        # current session until an Echo under that candidate arrives.
        if len(body) != crypto.POINT_BYTES:
            ctx.note("ignored", node=self.name, type="INIT_TRIGGER")
            return
        self.gw_public = body
        self._candidate = SymKey.generate(self._rng)
        inner = wire.u64(self.meter_id) + self._candidate.material
        env = crypto.ae_encrypt(self._init_key, inner, wire.aad_for(MsgType.INIT, self.meter_id))
        ctx.send(src, wire.frame(MsgType.INIT, wire.id_env(self.meter_id, env)))

    def _on_echo(self, src: str, body: bytes, ctx: Context) -> None:
        if self._candidate is None:
            ctx.note("ignored", node=self.name, type="ECHO")
            return
        mid, env = wire.read_id_env(body, wire.aad_for(MsgType.ECHO, self.meter_id))
        if mid != self.meter_id:
            raise WireError("echo for another meter")
        pt = crypto.ae_decrypt(self._candidate, env)
        if len(pt) != 24:
            raise WireError("echo payload")
        n0, t = pt[:16], wire.read_u64(pt, 16)
        first = not self.registered
        self.key, self._candidate = self._candidate, None
        self.ctr = 0
        self.latest = None
        self.awaiting = False
        self.nonce = n0
        self.time_offset = t - ctx.tick
        self.registered = True
        ack = crypto.ae_encrypt(self.key, nonce_plus_one(n0), wire.aad_for(MsgType.SM_ACK, self.meter_id))
        ctx.send(GW, wire.frame(MsgType.SM_ACK, wire.id_env(self.meter_id, ack)))
        ctx.note("sm_ready", meter_id=self.meter_id)
        if first:
            self._schedule_next_period(ctx)

    # -- reporting --------------------------------------------------------------

    def _schedule_next_period(self, ctx: Context) -> None:
        for p in range(1, self._sched.periods + 1):
            at = self._sched.period_start(p)
            if at > ctx.tick:
                ctx.set_timer(at - ctx.tick, ("period", p))
                return

    def make_report(self, reading: int) -> bytes:
        """Bump the counter, then encrypt id || reading || nonce || ctr."""
        self.ctr += 1
        plain = ReportPlain(self.meter_id, reading, self.nonce, self.ctr)
        env = crypto.ae_encrypt(self.key, plain.encode(), wire.REPORT_AAD)
        self.latest = (self.ctr, reading)
        return Report(self.meter_id, env).encode()

    def _period(self, p: int, ctx: Context) -> None:
        reading = self._readings(self.meter_id, p)
        body = self.make_report(reading)
        ctx.observe("sent", meter_id=self.meter_id, ctr=self.ctr, reading=reading, period=p)
        self._transmit(wire.frame(MsgType.REPORT, body), ctx)
        self._schedule_next_period(ctx)

    def _transmit(self, msg: bytes, ctx: Context) -> None:
        self.awaiting = True
        self._outstanding = msg
        self._attempt += 1
        ctx.send(GW, msg)
        ctx.set_timer(self._t.retransmit, ("retx", self._attempt, 1))

    def _retransmit(self, attempt: int, n: int, ctx: Context) -> None:
        if not self.awaiting or attempt != self._attempt or n > self._t.max_retries:
            return
        ctx.note("retransmit", node=self.name, n=n)
        ctx.send(GW, self._outstanding)
        ctx.set_timer(self._t.retransmit, ("retx", attempt, n + 1))

    def _on_response(self, src: str, body: bytes, ctx: Context) -> None:
        mid, env = wire.read_id_env(body, wire.aad_for(MsgType.REPORT_RESP, self.meter_id))
        if mid != self.meter_id or not self.registered:
            raise WireError("response for another meter")
        pt = crypto.ae_decrypt(self.key, env)
        if len(pt) != 24:
            raise WireError("response payload")
        ctr = wire.read_u64(pt)
        if not self.awaiting or ctr != self.ctr:
            ctx.note("ignored", node=self.name, type="REPORT_RESP", ctr=ctr)
            return
        self.nonce = pt[8:]
        self.awaiting = False
        self._outstanding = None

    def _on_restart(self, src: str, body: bytes, ctx: Context) -> None:
        mid, env = wire.read_id_env(body, wire.aad_for(MsgType.RESTART_REQ, self.meter_id))
        if mid != self.meter_id or not self.registered:
            raise WireError("restart request for another meter")
        n_r = crypto.ae_decrypt(self.key, env)
        if len(n_r) != wire.NONCE_BYTES:
            raise WireError("restart nonce")
        ctr, reading = self.latest if self.latest else (0, 0)
        plain = ReportPlain(self.meter_id, reading, n_r, ctr)
        env = crypto.ae_encrypt(self.key, plain.encode(), wire.REPORT_AAD)
        self._transmit(wire.frame(MsgType.RESEND, Report(self.meter_id, env).encode()), ctx)

    def _on_prices(self, src: str, body: bytes, ctx: Context) -> None:
        data, sig = body[:4 + 24 * 16], body[4 + 24 * 16:]
        if self.gw_public is None or not crypto.verify(self.gw_public, data, sig):
            raise AuthFailure()
        (day,) = struct.unpack(">I", data[:4])
        self.prices[day] = [struct.unpack(">QQ", data[4 + 16 * h:20 + 16 * h]) for h in range(24)]
        ctx.note("prices_received", meter_id=self.meter_id, day=day)

    # -- node interface -------------------------------------------------------------

    def receive(self, src: str, data: bytes, ctx: Context) -> None:
        try:
            kind, body = wire.unframe(data)
            handler = {
                MsgType.INIT_TRIGGER: self._on_trigger,
                MsgType.ECHO: self._on_echo,
                MsgType.REPORT_RESP: self._on_response,
                MsgType.RESTART_REQ: self._on_restart,
                MsgType.PRICE_BCAST: self._on_prices,
            }.get(kind)
            if handler is None:
                ctx.note("ignored", node=self.name, type=kind.name)
                return
            handler(src, body, ctx)
        except (AuthFailure, WireError, struct.error) as e:
            ctx.alarm(AlarmKind.TAMPER, self.meter_id, f"{self.name}: {e}")

    def on_timer(self, token: tuple, ctx: Context) -> None:
        if token[0] == "period":
            self._period(token[1], ctx)
        elif token[0] == "retx":
            self._retransmit(token[1], token[2], ctx)


class UserDevice:
    """Relays registration for one meter after attesting the gateway."""

    def __init__(
        self,
        meter_id: int,
        ids: Identities,
        rng: crypto.Randomness,
        timeouts: Timeouts = Timeouts(),
    ) -> None:
        self.meter_id = meter_id
        self.name = ud_name(meter_id)
        self._ids = ids
        self._expected = Measurement.of(ids.gateway)
        self._rng = rng
        self._t = timeouts
        self.state = "idle"
        self._challenge = b""
        self._done_challenge = b""
        self._gw_keys: Optional[tuple[bytes, bytes]] = None
        self._attempt = 0

    def start(self, ctx: Context) -> None:
        self._attempt += 1
        self._challenge = self._rng.bytes(16)
        self.state = "attesting"
        ctx.send(GW, wire.frame(MsgType.ATTEST_REQ, self._challenge))
        ctx.set_timer(self._t.protocol, ("deadline", self._attempt))

    def _fail(self, ctx: Context, kind: AlarmKind, detail: str) -> None:
        self.state = "failed"
        ctx.alarm(kind, self.meter_id, f"{self.name}: {detail}")

    def receive(self, src: str, data: bytes, ctx: Context) -> None:
        try:
            kind, body = wire.unframe(data)
        except WireError as e:
            self._fail(ctx, AlarmKind.TAMPER, str(e))
            return
        if kind is MsgType.ATTEST_RESP and self.state == "attesting":
            try:
                q = Quote.decode(body)
            except ValueError:
                q = None
            ud = q.user_data if q else b""
            if (
                q is None
                or not verify_quote(q, self._expected, self._ids.attestation_root)
                or len(ud) != 2 * crypto.POINT_BYTES + 16
                or not hmac.compare_digest(ud[130:], self._challenge)
            ):
                self._fail(ctx, AlarmKind.TAMPER, "gateway attestation rejected")
                return
            self._gw_keys = (ud[:65], ud[65:130])
            self.state = "await_init"
            ctx.send(f"sm/{self.meter_id}", wire.frame(MsgType.INIT_TRIGGER, ud[:65]))
        elif kind is MsgType.INIT and self.state == "await_init":
            self._done_challenge = self._rng.bytes(16)
            blob = crypto.pke_encrypt(
                self._gw_keys[1], body + self._done_challenge, self._rng, wire.aad_for(MsgType.INIT_PRIME)
            )
            self.state = "await_done"
            ctx.send(GW, wire.frame(MsgType.INIT_PRIME, blob))
        elif kind is MsgType.DONE and self.state == "await_done":
            mid_ok = len(body) > 24 and wire.read_u64(body) == self.meter_id
            msg = b"secgrid/done" + body[:24]
            if (
                not mid_ok
                or not hmac.compare_digest(body[8:24], self._done_challenge)
                or not crypto.verify(self._gw_keys[0], msg, body[24:])
            ):
                self._fail(ctx, AlarmKind.TAMPER, "done message rejected")
                return
            self.state = "done"
            ctx.note("ud_done", meter_id=self.meter_id)
        else:
            ctx.note("ignored", node=self.name, type=kind.name)

    def on_timer(self, token: tuple, ctx: Context) -> None:
        if token[0] == "deadline" and token[1] == self._attempt and self.state not in ("done", "failed"):
            self._fail(ctx, AlarmKind.TIMEOUT, f"registration stuck in {self.state}")
