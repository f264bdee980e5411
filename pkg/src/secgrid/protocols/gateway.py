"""Gateway: host node plus the gateway enclave program.

The enclave keeps per-meter sessions only as sealed records on the host
disk and reloads them for every report, so the host (and the adversary
that controls it) can serve stale versions. Counter and nonce checks turn
such rollbacks into alarms.
"""
from __future__ import annotations

import hmac
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .. import crypto, enclave as er, wire
from ..crypto import AuthFailure, DhSecret, SignKeypair, SymKey
from ..enclave import AttestationService, Measurement, NotFound, Quote, VersionedStore
from ..functions import (
    ArithmeticOverflow,
    CppCalendar,
    RtpParams,
    StsModel,
    TouParams,
    UsageWindow,
    aggregate_window,
    compute_bill,
    forecast_sts,
    price_cpp,
    price_rtp,
    rtp_predict_day,
)
from ..wire import MsgType, Report, ReportPlain, WireError
from .common import (
    AlarmKind,
    Context,
    Identities,
    MeterSession,
    ProtocolError,
    Schedule,
    TimeRef,
    Timeouts,
    nonce_plus_one,
)

CC = "cc"
GW = "gw"
DAY = 86400


def sm_name(meter_id: int) -> str:
    return f"sm/{meter_id}"


def session_label(meter_id: int) -> str:
    return f"meter/{meter_id}/session"


def lastreport_label(meter_id: int) -> str:
    return f"meter/{meter_id}/lastreport"


@dataclass
class GridConfig:
    """Public parameters of the functions the gateway runs per window."""

    tou: TouParams = field(default_factory=lambda: TouParams(120, 80, ((17 * 60, 21 * 60),)))
    cpp: CppCalendar = field(default_factory=CppCalendar)
    rtp: RtpParams = field(default_factory=lambda: RtpParams(1000, {}, {}))
    rtp_default_a: tuple = tuple([100] * 24)
    rtp_default_b: tuple = tuple([180] * 24)
    sts: StsModel = field(default_factory=StsModel)
    area_id: str = "area-0"

    def rtp_day(self, day: int) -> tuple[list, list]:
        return (
            list(self.rtp.a.get(day, self.rtp_default_a)),
            list(self.rtp.b.get(day, self.rtp_default_b)),
        )


class GatewayEnclave:
    """Trusted half of the gateway. One instance per enclave boot."""

    def __init__(
        self,
        host: "Gateway",
        generation: int,
        ids: Identities,
        attestation: AttestationService,
        root_seal_secret: bytes,
        rng: crypto.Randomness,
        timeouts: Timeouts,
        schedule: Schedule,
        grid: GridConfig,
    ) -> None:
        self._host = host
        self._gen = generation
        self._e = er.create_enclave(ids.gateway, root_seal_secret, attestation, rng)
        self._ids = ids
        self._t = timeouts
        self._sched = schedule
        self._grid = grid
        self._expected_cc = Measurement.of(ids.control)
        self._rng = rng
        m = self._e.memory
        m.update(
            phase="boot",
            pending_init={},
            halted=set(),
            keys={},
            window=[],
            agg_history=[],
            hour_usage={},
            outq=[],
            outstanding=None,
            attempt=0,
        )

    # -- host-visible facts -------------------------------------------------

    @property
    def measurement(self) -> Measurement:
        return self._e.measurement

    @property
    def phase(self) -> str:
        return self._e.memory["phase"]

    @property
    def public_keys(self) -> tuple[bytes, bytes]:
        m = self._e.memory
        return m["sign"].public, m["kem_pk"]

    def now(self, tick: int) -> Optional[int]:
        tr = self._e.memory.get("timeref")
        return None if tr is None else tr.now(tick)

    def destroy(self) -> None:
        self._e.destroy()

    # -- helpers --------------------------------------------------------------

    def _seal(self, label: str, data: bytes) -> None:
        er.enclave_store(self._host.store, er.seal(self._e, label, data))

    def _unseal(self, label: str) -> bytes:
        rec = er.enclave_load(self._host.store, label)
        if rec.label != label.encode():
            raise AuthFailure()
        return er.unseal(self._e, rec)

    def _key_for(self, meter_id: int, material: bytes) -> SymKey:
        keys = self._e.memory["keys"]
        k = keys.get(meter_id)
        if k is None or k.material != material:
            k = SymKey(material, self._rng.bytes(4))
            keys[meter_id] = k
        return k

    def _load_session(self, meter_id: int) -> MeterSession:
        raw = self._unseal(session_label(meter_id))
        s = MeterSession.decode(raw, b"\x00" * 4)
        s.key = self._key_for(meter_id, s.key.material)
        return s

    def _store_session(self, meter_id: int, s: MeterSession) -> None:
        self._seal(session_label(meter_id), s.encode())

    def _timer(self, ctx: Context, delay: int, *token) -> None:
        ctx.set_timer(delay, (self._gen, *token))

    def _alarm(self, ctx: Context, kind: AlarmKind, meter_id: Optional[int], detail: str) -> None:
        m = self._e.memory
        ctx.alarm(kind, meter_id, f"gw: {detail}")
        if kind in (AlarmKind.ROLLBACK, AlarmKind.RESTORE) and meter_id is not None:
            m["halted"].add(meter_id)
        if "k_out" in m and not (kind is AlarmKind.TIMEOUT and meter_id is None):
            self._enqueue([wire.alarm_record(kind, meter_id, ctx.tick)], ctx)

    def _env(self, key: SymKey, kind: MsgType, plaintext: bytes, meter_id: Optional[int] = None) -> bytes:
        return crypto.ae_encrypt(key, plaintext, wire.aad_for(kind, meter_id)).encode()

    # -- entry points ---------------------------------------------------------

    def start(self, ctx: Context) -> None:
        """Fresh boot: create long-term keys and attest to the control enclave."""
        with self._e.lock:
            m = self._e.memory
            sign_kp = SignKeypair.generate(self._rng)
            kem_kp = SignKeypair.generate(self._rng)
            m.update(sign=sign_kp, kem=DhSecret(kem_kp.secret), kem_pk=kem_kp.public)
            self._seal("gw/identity", sign_kp.secret_bytes() + kem_kp.secret_bytes())
            self._seal("gw/meters", b"")
            self._seal("gw/window", wire.u64(0))
            m["win_seq"] = 0
            self._send_attest(ctx)

    def _send_attest(self, ctx: Context) -> None:
        m = self._e.memory
        a, g_a = crypto.dh_generate(self._rng)
        m.update(dh=a, g_a=g_a, phase="await_cc", attempt=m["attempt"] + 1)
        quote = er.get_quote(self._e, m["sign"].public + m["kem_pk"] + g_a)
        ctx.send(CC, wire.frame(MsgType.ATTEST_GW, quote.encode()))
        self._timer(ctx, self._t.protocol, "init", m["attempt"])

    def handle(self, src: str, data: bytes, ctx: Context) -> None:
        with self._e.lock:
            if not self._e.alive:
                return
            try:
                kind, body = wire.unframe(data)
            except WireError as e:
                self._alarm(ctx, AlarmKind.TAMPER, None, str(e))
                return
            handler = {
                MsgType.ATTEST_CC: self._on_attest_cc,
                MsgType.INIT_ACK: self._on_init_ack,
                MsgType.ATTEST_REQ: self._on_attest_req,
                MsgType.INIT_PRIME: self._on_init_prime,
                MsgType.INIT_KEY: self._on_init_key,
                MsgType.SM_ACK: self._on_sm_ack,
                MsgType.REPORT: self._on_report,
                MsgType.WINDOW_ACK: self._on_window_ack,
                MsgType.RESEND: self._on_resend,
                MsgType.TIME_RESP: self._on_time_resp,
            }.get(kind)
            if handler is None:
                ctx.note("ignored", node=GW, type=kind.name)
                return
            try:
                handler(src, body, ctx)
            except ProtocolError as e:
                self._alarm(ctx, e.kind, e.meter_id, e.detail)
            except (WireError, struct.error, IndexError) as e:
                self._alarm(ctx, AlarmKind.TAMPER, None, f"malformed {kind.name}: {e}")

    def on_timer(self, token: tuple, ctx: Context) -> None:
        with self._e.lock:
            if not self._e.alive or token[0] != self._gen:
                return
            name, args = token[1], token[2:]
            m = self._e.memory
            if name == "init":
                if m["phase"] in ("await_cc", "await_ack") and args[0] == m["attempt"]:
                    m["phase"] = "failed"
                    self._alarm(ctx, AlarmKind.TIMEOUT, None, "control enclave handshake timed out")
            elif name == "sminit":
                mid, req = args
                p = m["pending_init"].get(mid)
                if p is not None and p["req"] == req:
                    del m["pending_init"][mid]
                    self._alarm(ctx, AlarmKind.TIMEOUT, mid, "meter initialization timed out")
            elif name == "window":
                self._close_window(args[0], ctx)
            elif name == "win_retx":
                self._retransmit_window(args[0], args[1], ctx)
            elif name == "restore":
                self._restore_deadline(ctx)

    # -- CC/GW initialization ---------------------------------------------------

    def _on_attest_cc(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] != "await_cc":
            ctx.note("ignored", node=GW, type="ATTEST_CC")
            return
        try:
            q = Quote.decode(body)
        except ValueError as e:
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, f"bad control quote: {e}")
        ok = er.verify_quote(q, self._expected_cc, self._ids.attestation_root)
        ud = q.user_data
        if not ok or len(ud) != 65 + 65 + 8 + 32 or ud[138:] != crypto.sha256(m["g_a"]):
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, "control quote rejected")
        pk_cc, g_b = ud[:65], ud[65:130]
        (cc_time,) = struct.unpack(">Q", ud[130:138])
        try:
            ss = crypto.dh_combine(m["dh"], g_b)
        except crypto.InvalidGroupElement:
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, "invalid DH share")
        m.update(
            timeref=TimeRef(cc_time, ctx.tick),
            pk_cc=pk_cc,
            ss=ss,
            k_out=crypto.kdf_session(ss, b"gw->cc", self._rng.bytes(4)),
            k_in=crypto.kdf_session(ss, b"cc->gw", self._rng.bytes(4)),
            phase="await_ack",
        )
        env = self._env(m["k_out"], MsgType.TIME_CONFIRM, wire.u64(self.now(ctx.tick)))
        body_out = wire.lp(env) + crypto.sign(m["sign"].secret, env)
        m["confirm_digest"] = crypto.sha256(body_out)
        ctx.send(CC, wire.frame(MsgType.TIME_CONFIRM, body_out))

    def _on_init_ack(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] != "await_ack":
            ctx.note("ignored", node=GW, type="INIT_ACK")
            return
        env_bytes, pos = wire.read_lp(body)
        if not crypto.verify(m["pk_cc"], env_bytes, body[pos:]):
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, "init ack signature")
        try:
            pt = crypto.ae_decrypt(m["k_in"], wire.decode_only_env(env_bytes, wire.aad_for(MsgType.INIT_ACK)))
        except AuthFailure:
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, "init ack ciphertext")
        if pt != b"ack" + m["confirm_digest"]:
            m["phase"] = "failed"
            raise ProtocolError(AlarmKind.TAMPER, "init ack does not confirm our message")
        self._seal("gw/cc", m["ss"] + m["pk_cc"])
        m["phase"] = "established"
        for k in ("dh", "g_a", "confirm_digest"):
            m.pop(k, None)
        ctx.note("gw_established", node=GW)
        self._schedule_next_window(ctx)

    # -- SM initialization --------------------------------------------------------

    def _on_attest_req(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if "sign" not in m or len(body) != 16:
            raise ProtocolError(AlarmKind.TAMPER, "attestation request")
        quote = er.get_quote(self._e, m["sign"].public + m["kem_pk"] + body)
        ctx.send(src, wire.frame(MsgType.ATTEST_RESP, quote.encode()))

    def _on_init_prime(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] != "established":
            ctx.note("ignored", node=GW, type="INIT_PRIME")
            return
        try:
            init = crypto.pke_decrypt(m["kem"], m["kem_pk"], body, wire.aad_for(MsgType.INIT_PRIME))
        except AuthFailure:
            raise ProtocolError(AlarmKind.TAMPER, "Init' failed authentication")
        meter_id = wire.read_u64(init)
        env, rest = wire.decode_env(init[8:], wire.aad_for(MsgType.INIT, meter_id))
        if len(rest) != 16:
            raise ProtocolError(AlarmKind.TAMPER, "Init' payload", meter_id)
        if meter_id in m["pending_init"]:
            ctx.note("ignored", node=GW, type="INIT_PRIME", meter_id=meter_id)
            return
        req = self._rng.bytes(16)
        m["pending_init"][meter_id] = {"env": env, "ud": src, "challenge": rest, "req": req, "stage": "key"}
        out = self._env(m["k_out"], MsgType.GET_INIT_KEY, wire.u64(meter_id) + req)
        ctx.send(CC, wire.frame(MsgType.GET_INIT_KEY, out))
        self._timer(ctx, self._t.protocol, "sminit", meter_id, req)

    def _on_init_key(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if "k_in" not in m:
            ctx.note("ignored", node=GW, type="INIT_KEY")
            return
        try:
            pt = crypto.ae_decrypt(m["k_in"], wire.decode_only_env(body, wire.aad_for(MsgType.INIT_KEY)))
        except AuthFailure:
            raise ProtocolError(AlarmKind.TAMPER, "initKey failed authentication")
        if len(pt) != 8 + 16 + 1 + 16:
            raise ProtocolError(AlarmKind.TAMPER, "initKey payload")
        meter_id = wire.read_u64(pt)
        req, status, key = pt[8:24], pt[24], pt[25:]
        p = m["pending_init"].get(meter_id)
        if p is None or p["stage"] != "key" or not hmac.compare_digest(p["req"], req):
            ctx.note("ignored", node=GW, type="INIT_KEY", meter_id=meter_id)
            return
        if status != 0:
            del m["pending_init"][meter_id]
            ctx.note("sm_init_denied", meter_id=meter_id, status=status)
            return
        try:
            inner = crypto.ae_decrypt(SymKey(key, b"\x00" * 4), p["env"])
        except AuthFailure:
            del m["pending_init"][meter_id]
            raise ProtocolError(AlarmKind.TAMPER, "Init does not open under the init key", meter_id)
        if len(inner) != 24 or wire.read_u64(inner) != meter_id:
            del m["pending_init"][meter_id]
            raise ProtocolError(AlarmKind.TAMPER, "Init names another meter", meter_id)
        k_i = SymKey(inner[8:], self._rng.bytes(4))
        m["keys"][meter_id] = k_i
        n0 = self._rng.bytes(16)
        done_msg = b"secgrid/done" + wire.u64(meter_id) + p["challenge"]
        done = wire.u64(meter_id) + p["challenge"] + crypto.sign(m["sign"].secret, done_msg)
        echo = self._env(k_i, MsgType.ECHO, n0 + wire.u64(self.now(ctx.tick)), meter_id)
        p.update(stage="ack", n0=n0, key=k_i)
        ctx.send(p["ud"], wire.frame(MsgType.DONE, done))
        ctx.send(sm_name(meter_id), wire.frame(MsgType.ECHO, wire.u64(meter_id) + echo))

    def _on_sm_ack(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        meter_id = wire.read_u64(body)
        p = m["pending_init"].get(meter_id)
        if p is None or p["stage"] != "ack":
            ctx.note("ignored", node=GW, type="SM_ACK", meter_id=meter_id)
            return
        try:
            env = wire.decode_only_env(body[8:], wire.aad_for(MsgType.SM_ACK, meter_id))
            pt = crypto.ae_decrypt(p["key"], env)
        except AuthFailure:
            del m["pending_init"][meter_id]
            raise ProtocolError(AlarmKind.TAMPER, "Ack failed authentication", meter_id)
        if not hmac.compare_digest(pt, nonce_plus_one(p["n0"])):
            del m["pending_init"][meter_id]
            raise ProtocolError(AlarmKind.FRESHNESS, "Ack does not carry nonce+1", meter_id)
        del m["pending_init"][meter_id]
        self._store_session(meter_id, MeterSession(p["key"], 0, p["n0"], b""))
        meters = self._meters()
        if meter_id not in meters:
            self._seal("gw/meters", b"".join(wire.u64(x) for x in sorted(meters + [meter_id])))
        ctx.note("sm_registered", meter_id=meter_id)

    def _meters(self) -> list[int]:
        raw = self._unseal("gw/meters")
        return [wire.read_u64(raw, i) for i in range(0, len(raw), 8)]

    # -- periodic report ----------------------------------------------------------

    def _open_report(self, body: bytes) -> tuple[Report, MeterSession, ReportPlain]:
        rep = Report.decode(body)
        mid = rep.meter_id_clear
        try:
            sess = self._load_session(mid)
        except NotFound:
            raise ProtocolError(AlarmKind.UNKNOWN, "report from meter without session", mid)
        except (AuthFailure, WireError, ValueError):
            raise ProtocolError(AlarmKind.TAMPER, "sealed session unreadable", mid)
        try:
            plain = ReportPlain.decode(crypto.ae_decrypt(sess.key, rep.envelope, wire.REPORT_AAD))
        except AuthFailure:
            raise ProtocolError(AlarmKind.TAMPER, "report failed authentication", mid)
        if plain.meter_id != mid:
            raise ProtocolError(AlarmKind.TAMPER, "encrypted id differs from clear id", mid)
        return rep, sess, plain

    def _response(self, sess: MeterSession, mid: int, ctr: int, next_nonce: bytes) -> bytes:
        env = self._env(sess.key, MsgType.REPORT_RESP, wire.u64(ctr) + next_nonce, mid)
        return wire.frame(MsgType.REPORT_RESP, wire.u64(mid) + env)

    def _commit_report(self, body: bytes, sess: MeterSession, plain: ReportPlain, ctx: Context) -> bytes:
        mid = plain.meter_id
        next_nonce = self._rng.bytes(16)
        resp = self._response(sess, mid, plain.ctr, next_nonce)
        self._seal(lastreport_label(mid), body)
        self._store_session(mid, MeterSession(sess.key, plain.ctr, next_nonce, resp))
        self._e.memory["window"].append((mid, plain.ctr, plain.reading))
        ctx.observe("accept", meter_id=mid, ctr=plain.ctr, reading=plain.reading)
        ctx.note("accept", meter_id=mid, ctr=plain.ctr)
        return resp

    def process_report(self, body: bytes, ctx: Context) -> str:
        """Check and apply one report body. Returns the outcome name."""
        m = self._e.memory
        rep, sess, plain = self._open_report(body)
        mid = plain.meter_id
        if mid in m["halted"]:
            ctx.note("rejected_halted", meter_id=mid)
            return "halted"
        if plain.ctr == sess.ctr_old:
            try:
                last = self._unseal(lastreport_label(mid))
            except (NotFound, AuthFailure, ValueError):
                last = b""
            if sess.last_response and hmac.compare_digest(last, body):
                ctx.note("resend_answered", meter_id=mid, ctr=plain.ctr)
                ctx.send(sm_name(mid), sess.last_response)
                return "resend"
            raise ProtocolError(AlarmKind.REPLAY, f"ctr {plain.ctr} already accepted", mid)
        if plain.ctr < sess.ctr_old:
            raise ProtocolError(AlarmKind.REPLAY, f"ctr {plain.ctr} < {sess.ctr_old}", mid)
        if plain.ctr > sess.ctr_old + 1:
            raise ProtocolError(AlarmKind.ROLLBACK, f"ctr {plain.ctr} > {sess.ctr_old} + 1", mid)
        if not hmac.compare_digest(plain.nonce, sess.nonce_expected):
            raise ProtocolError(AlarmKind.FRESHNESS, "nonce mismatch", mid)
        ctx.send(sm_name(mid), self._commit_report(body, sess, plain, ctx))
        return "accepted"

    def _on_report(self, src: str, body: bytes, ctx: Context) -> None:
        if self._e.memory["phase"] != "established":
            ctx.note("ignored", node=GW, type="REPORT")
            return
        self.process_report(body, ctx)

    # -- outputs to the control center ------------------------------------------------

    def forward_to_cc(self, records: list[bytes], seq: int) -> bytes:
        m = self._e.memory
        env = self._env(m["k_out"], MsgType.WINDOW, wire.u64(seq) + b"".join(records))
        return wire.frame(MsgType.WINDOW, env)

    def _enqueue(self, records: list[bytes], ctx: Context) -> None:
        self._e.memory["outq"].append(records)
        self._pump(ctx)

    def _pump(self, ctx: Context) -> None:
        m = self._e.memory
        if m["outstanding"] is not None or not m["outq"] or "k_out" not in m:
            return
        records = m["outq"].pop(0)
        seq = m["win_seq"] + 1
        m["win_seq"] = seq
        self._seal("gw/window", wire.u64(seq))
        msg = self.forward_to_cc(records, seq)
        m["outstanding"] = [seq, msg, 0]
        ctx.send(CC, msg)
        self._timer(ctx, self._t.retransmit, "win_retx", seq, 0)

    def _retransmit_window(self, seq: int, attempt: int, ctx: Context) -> None:
        m = self._e.memory
        out = m["outstanding"]
        if out is None or out[0] != seq or out[2] != attempt:
            return
        if attempt >= self._t.max_retries:
            m["outstanding"] = None
            self._alarm(ctx, AlarmKind.TIMEOUT, None, f"window {seq} never acknowledged")
            self._pump(ctx)
            return
        out[2] = attempt + 1
        ctx.send(CC, out[1])
        self._timer(ctx, self._t.retransmit, "win_retx", seq, attempt + 1)

    def _on_window_ack(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        try:
            env = wire.decode_only_env(body, wire.aad_for(MsgType.WINDOW_ACK))
            seq = wire.read_u64(crypto.ae_decrypt(m["k_in"], env))
        except (AuthFailure, KeyError):
            raise ProtocolError(AlarmKind.TAMPER, "window ack failed authentication")
        out = m["outstanding"]
        if out is None or out[0] != seq:
            ctx.note("ignored", node=GW, type="WINDOW_ACK", seq=seq)
            return
        m["outstanding"] = None
        self._pump(ctx)

    def _schedule_next_window(self, ctx: Context) -> None:
        s = self._sched
        for p in range(1, s.periods + 1):
            at = s.window_close_tick(p)
            if at > ctx.tick:
                self._timer(ctx, at - ctx.tick, "window", p)
                return

    def _close_window(self, period: int, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] != "established":
            return
        g = self._grid
        arrivals, m["window"] = m["window"], []
        meters = tuple(sorted({a[0] for a in arrivals}))
        w = UsageWindow(g.area_id, period, 1, meters, [(mid, period, r) for mid, _, r in arrivals])
        records = []
        try:
            total = aggregate_window(w, require_complete=False)
            records.append(wire.agg_record(period, total))
            m["agg_history"].append(total * 1000)
        except ArithmeticOverflow:
            self._alarm(ctx, AlarmKind.UNKNOWN, None, f"aggregate overflow in window {period}")
        now = self.now(ctx.tick)
        day, minute = divmod(now, DAY)
        minute //= 60
        records.append(wire.price_record(period, price_cpp(day, minute, g.tou, g.cpp)))
        if len(m["agg_history"]) >= g.sts.order:
            load = forecast_sts(m["agg_history"], g.sts, step=period)
            records.append(wire.forecast_record(period + 1, load))
        records.extend(self._hourly_bills(period, day, minute // 60, arrivals, ctx))
        self._enqueue(records, ctx)
        nxt = self._sched.window_close_tick(period + 1)
        if (now + (nxt - ctx.tick)) // DAY != day:
            self._broadcast_prediction(day + 1, ctx)
        self._schedule_next_window(ctx)

    def _hourly_bills(self, period: int, day: int, hour: int, arrivals: list, ctx: Context) -> list[bytes]:
        m = self._e.memory
        usage = m["hour_usage"]
        for mid, _, reading in arrivals:
            usage[mid] = usage.get(mid, 0) + reading
        per_hour = max(1, 3600 // self._sched.interval)
        if period % per_hour:
            return []
        a, b = self._grid.rtp_day(day)
        out = []
        hour_index = day * 24 + hour
        for mid in sorted(usage):
            m_h = usage[mid]
            price = price_rtp(m_h, a[hour], b[hour], self._grid.rtp.m0)
            try:
                amount = compute_bill([m_h], [price])
            except ArithmeticOverflow:
                self._alarm(ctx, AlarmKind.UNKNOWN, mid, "bill overflow")
                continue
            out.append(wire.bill_record(mid, hour_index, amount))
        m["hour_usage"] = {}
        return out

    def _broadcast_prediction(self, day: int, ctx: Context) -> None:
        g = self._grid
        hist_a, hist_b = {}, {}
        for d in (day - 1, day - 2, day - 7):
            hist_a[d], hist_b[d] = g.rtp_day(d)
        a_hat, b_hat = rtp_predict_day(hist_a, hist_b, day, g.rtp.k)
        body = struct.pack(">I", day) + b"".join(
            struct.pack(">QQ", int(x), int(y)) for x, y in zip(a_hat, b_hat)
        )
        sig = crypto.sign(self._e.memory["sign"].secret, body)
        msg = wire.frame(MsgType.PRICE_BCAST, body + sig)
        ctx.note("price_broadcast", day=day)
        for mid in self._meters():
            ctx.send(sm_name(mid), msg)

    # -- restart ----------------------------------------------------------------

    def restore(self, ctx: Context) -> None:
        """Boot after a restart: unseal everything, then ask CE and meters."""
        with self._e.lock:
            m = self._e.memory
            m["phase"] = "restoring"
            try:
                ident = self._unseal("gw/identity")
                cc = self._unseal("gw/cc")
                meters = self._meters()
                (seq,) = struct.unpack(">Q", self._unseal("gw/window"))
                sessions = {mid: self._load_session(mid) for mid in meters}
                for mid in meters:
                    if sessions[mid].ctr_old:
                        self._unseal(lastreport_label(mid))
            except (NotFound, AuthFailure, ValueError, WireError, struct.error) as e:
                m["phase"] = "failed"
                ctx.alarm(AlarmKind.RESTORE, None, f"gw: unseal failed during restore: {e!r}")
                return
            sign_kp = SignKeypair.from_secret_bytes(ident[:32])
            kem_kp = SignKeypair.from_secret_bytes(ident[32:64])
            ss, pk_cc = cc[:32], cc[32:]
            m.update(
                sign=sign_kp,
                kem=DhSecret(kem_kp.secret),
                kem_pk=kem_kp.public,
                ss=ss,
                pk_cc=pk_cc,
                k_out=crypto.kdf_session(ss, b"gw->cc", self._rng.bytes(4)),
                k_in=crypto.kdf_session(ss, b"cc->gw", self._rng.bytes(4)),
                win_seq=seq,
            )
            challenge = self._rng.bytes(16)
            waiting = {}
            for mid, sess in sessions.items():
                n_r = self._rng.bytes(16)
                waiting[mid] = n_r
                env = self._env(sess.key, MsgType.RESTART_REQ, n_r, mid)
                ctx.send(sm_name(mid), wire.frame(MsgType.RESTART_REQ, wire.u64(mid) + env))
            m["restore"] = {"challenge": challenge, "waiting": waiting, "time": None}
            env = self._env(m["k_out"], MsgType.TIME_REQ, challenge)
            ctx.send(CC, wire.frame(MsgType.TIME_REQ, env))
            self._timer(ctx, self._t.protocol, "restore")

    def _on_time_resp(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        r = m.get("restore")
        if m["phase"] != "restoring" or r is None:
            ctx.note("ignored", node=GW, type="TIME_RESP")
            return
        try:
            pt = crypto.ae_decrypt(m["k_in"], wire.decode_only_env(body, wire.aad_for(MsgType.TIME_RESP)))
        except AuthFailure:
            raise ProtocolError(AlarmKind.TAMPER, "time response failed authentication")
        if len(pt) != 24 or not hmac.compare_digest(pt[:16], r["challenge"]):
            raise ProtocolError(AlarmKind.FRESHNESS, "time response does not answer our challenge")
        r["time"] = wire.read_u64(pt, 16)
        m["timeref"] = TimeRef(r["time"], ctx.tick)
        self._maybe_restored(ctx)

    def _on_resend(self, src: str, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        r = m.get("restore")
        if m["phase"] != "restoring" or r is None:
            ctx.note("ignored", node=GW, type="RESEND")
            return
        rep = Report.decode(body)
        mid = rep.meter_id_clear
        if mid not in r["waiting"]:
            ctx.note("ignored", node=GW, type="RESEND", meter_id=mid)
            return
        try:
            _, sess, plain = self._open_report(body)
        except ProtocolError as e:
            del r["waiting"][mid]
            raise ProtocolError(AlarmKind.RESTORE, f"resend rejected: {e.detail}", mid)
        n_r = r["waiting"].pop(mid)
        if not hmac.compare_digest(plain.nonce, n_r):
            raise ProtocolError(AlarmKind.RESTORE, "resend carries a stale nonce", mid)
        if plain.ctr == sess.ctr_old:
            next_nonce = self._rng.bytes(16)
            resp = self._response(sess, mid, plain.ctr, next_nonce)
            self._store_session(mid, MeterSession(sess.key, plain.ctr, next_nonce, resp))
            ctx.note("restore_meter", meter_id=mid, ctr=plain.ctr, missed=0)
        elif plain.ctr == sess.ctr_old + 1:
            resp = self._commit_report(body, sess, plain, ctx)
            ctx.note("restore_meter", meter_id=mid, ctr=plain.ctr, missed=1)
        else:
            self._maybe_restored(ctx)
            raise ProtocolError(
                AlarmKind.RESTORE, f"resend ctr {plain.ctr} not in {{{sess.ctr_old}, {sess.ctr_old + 1}}}", mid
            )
        ctx.send(sm_name(mid), resp)
        self._maybe_restored(ctx)

    def _maybe_restored(self, ctx: Context) -> None:
        m = self._e.memory
        r = m["restore"]
        if r["time"] is None or r["waiting"]:
            return
        m["phase"] = "established"
        m.pop("restore")
        ctx.note("gw_restored", node=GW)
        self._schedule_next_window(ctx)
        self._pump(ctx)

    def _restore_deadline(self, ctx: Context) -> None:
        m = self._e.memory
        r = m.get("restore")
        if m["phase"] != "restoring" or r is None:
            return
        for mid in sorted(r["waiting"]):
            self._alarm(ctx, AlarmKind.RESTORE, mid, "meter did not answer restore request")
        r["waiting"] = {}
        if r["time"] is None:
            m["phase"] = "failed"
            self._alarm(ctx, AlarmKind.RESTORE, None, "control enclave time unavailable")
            return
        self._maybe_restored(ctx)


class Gateway:
    """Untrusted gateway host: disk, network, and enclave lifecycle."""

    name = GW

    def __init__(self, factory: Callable[["Gateway", int], GatewayEnclave]) -> None:
        self.store = VersionedStore()
        self._factory = factory
        self.generation = 0
        self.enclave: Optional[GatewayEnclave] = None
        self.down = False

    def boot(self, ctx: Context, restore: bool = False) -> None:
        self.generation += 1
        self.enclave = self._factory(self, self.generation)
        self.down = False
        if restore:
            self.enclave.restore(ctx)
        else:
            self.enclave.start(ctx)

    def crash(self) -> None:
        if self.enclave is not None:
            self.enclave.destroy()
        self.enclave = None
        self.down = True

    def receive(self, src: str, data: bytes, ctx: Context) -> None:
        if self.enclave is None:
            ctx.note("undeliverable", node=GW, src=src)
            return
        self.enclave.handle(src, data, ctx)

    def on_timer(self, token: tuple, ctx: Context) -> None:
        if token and token[0] == "boot":
            self.boot(ctx, restore=token[1])
        elif self.enclave is not None:
            self.enclave.on_timer(token, ctx)
