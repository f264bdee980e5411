"""Control center: host node plus the control enclave program."""
from __future__ import annotations

import struct
from typing import Iterable, Optional

from .. import crypto, enclave as er, wire
from ..crypto import AuthFailure, CipherEnvelope, InvalidGroupElement, SignKeypair
from ..enclave import AttestationService, Measurement, Quote, VersionedStore
from ..keyring import AlreadyVoid, IntegrityError, KeyNotFound, LeafStorage, MerkleKeyStore, build_store
from ..wire import MsgType, WireError
from .common import AlarmKind, Context, Identities, ProtocolError, Timeouts

CC = "cc"
GW = "gw"

STATUS_OK = 0
STATUS_VOID = 1
STATUS_UNKNOWN = 2
STATUS_INTEGRITY = 3


class ControlEnclave:
    """Trusted half of the control center.

    Phases: ``idle`` -> ``await_confirm`` -> ``established``.
    """

    def __init__(
        self,
        host: "ControlCenter",
        ids: Identities,
        attestation: AttestationService,
        root_seal_secret: bytes,
        rng: crypto.Randomness,
        timeouts: Timeouts,
        init_keys: Iterable[tuple[int, bytes]] = (),
    ) -> None:
        self._host = host
        self._e = er.create_enclave(ids.control, root_seal_secret, attestation, rng)
        self._ids = ids
        self._t = timeouts
        self._expected_gw = Measurement.of(ids.gateway)
        m = self._e.memory
        m["sign"] = SignKeypair.generate(rng)
        m["phase"] = "idle"
        m["keyring"] = build_store(init_keys, self._e, LeafStorage(host.store))
        m["win_last"] = 0
        m["win_last_bytes"] = b""
        m["win_last_ack"] = b""

    # -- host-visible facts -------------------------------------------------

    @property
    def measurement(self) -> Measurement:
        return self._e.measurement

    @property
    def public_key(self) -> bytes:
        return self._e.memory["sign"].public

    @property
    def phase(self) -> str:
        return self._e.memory["phase"]

    @property
    def keyring_root(self) -> bytes:
        return self._e.memory["keyring"].root

    # -- entry point ---------------------------------------------------------

    def handle(self, src: str, data: bytes, ctx: Context) -> None:
        with self._e.lock:
            try:
                kind, body = wire.unframe(data)
            except WireError as e:
                ctx.alarm(AlarmKind.TAMPER, None, f"cc: {e}")
                return
            handler = {
                MsgType.ATTEST_GW: self._on_attest_gw,
                MsgType.TIME_CONFIRM: self._on_time_confirm,
                MsgType.GET_INIT_KEY: self._on_get_init_key,
                MsgType.WINDOW: self._on_window,
                MsgType.TIME_REQ: self._on_time_req,
            }.get(kind)
            if handler is None:
                ctx.note("ignored", node=CC, type=kind.name)
                return
            try:
                handler(body, ctx)
            except ProtocolError as e:
                ctx.alarm(e.kind, e.meter_id, f"cc: {e.detail}")
            except (WireError, struct.error, IndexError) as e:
                ctx.alarm(AlarmKind.TAMPER, None, f"cc: malformed {kind.name}: {e}")

    def on_timer(self, token: tuple, ctx: Context) -> None:
        with self._e.lock:
            m = self._e.memory
            if token[0] == "confirm" and m["phase"] == "await_confirm" and m.get("attempt") == token[1]:
                self._abort()
                ctx.alarm(AlarmKind.TIMEOUT, None, "cc: no time confirmation from gateway")

    # -- CC/GW initialization ----------------------------------------------

    def _abort(self) -> None:
        m = self._e.memory
        for k in ("dh", "peer", "k_in", "k_out", "ss", "sent_time"):
            m.pop(k, None)
        m["phase"] = "idle"

    def _on_attest_gw(self, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] == "established":
            ctx.note("ignored", node=CC, type="ATTEST_GW")
            return
        try:
            q = Quote.decode(body)
        except ValueError as e:
            raise ProtocolError(AlarmKind.TAMPER, f"bad gateway quote: {e}")
        if not er.verify_quote(q, self._expected_gw, self._ids.attestation_root):
            raise ProtocolError(AlarmKind.TAMPER, "gateway quote rejected")
        ud = q.user_data
        if len(ud) != 3 * crypto.POINT_BYTES:
            raise ProtocolError(AlarmKind.TAMPER, "gateway quote payload")
        pk_sign, pk_kem, g_a = ud[:65], ud[65:130], ud[130:]
        b, g_b = crypto.dh_generate(self._e.rng)
        try:
            ss = crypto.dh_combine(b, g_a)
        except InvalidGroupElement:
            raise ProtocolError(AlarmKind.TAMPER, "invalid DH share")
        now = ctx.wall_time()
        user = m["sign"].public + g_b + struct.pack(">Q", now) + crypto.sha256(g_a)
        quote = er.get_quote(self._e, user)
        m.update(
            phase="await_confirm",
            peer=(pk_sign, pk_kem),
            ss=ss,
            k_in=crypto.kdf_session(ss, b"gw->cc", self._e.rng.bytes(4)),
            k_out=crypto.kdf_session(ss, b"cc->gw", self._e.rng.bytes(4)),
            attempt=m.get("attempt", 0) + 1,
        )
        ctx.send(GW, wire.frame(MsgType.ATTEST_CC, quote.encode()))
        ctx.set_timer(self._t.protocol, ("confirm", m["attempt"]))

    def _on_time_confirm(self, body: bytes, ctx: Context) -> None:
        m = self._e.memory
        if m["phase"] != "await_confirm":
            ctx.note("ignored", node=CC, type="TIME_CONFIRM")
            return
        env_bytes, pos = wire.read_lp(body)
        sig = body[pos:]
        if not crypto.verify(m["peer"][0], env_bytes, sig):
            self._abort()
            raise ProtocolError(AlarmKind.TAMPER, "time confirmation signature")
        try:
            env = wire.decode_only_env(env_bytes, wire.aad_for(MsgType.TIME_CONFIRM))
            t = wire.read_u64(crypto.ae_decrypt(m["k_in"], env))
        except (AuthFailure, WireError):
            self._abort()
            raise ProtocolError(AlarmKind.TAMPER, "time confirmation ciphertext")
        if abs(t - ctx.wall_time()) > self._t.time_tolerance:
            self._abort()
            raise ProtocolError(AlarmKind.FRESHNESS, f"gateway time off by {t - ctx.wall_time()} s")
        sealed = er.seal(self._e, "cc/session", m["ss"] + m["peer"][0] + m["peer"][1])
        er.enclave_store(self._host.store, sealed)
        ack = crypto.ae_encrypt(m["k_out"], b"ack" + crypto.sha256(body), wire.aad_for(MsgType.INIT_ACK))
        ack_bytes = ack.encode()
        sig = crypto.sign(m["sign"].secret, ack_bytes)
        m["phase"] = "established"
        ctx.note("cc_established", node=CC)
        ctx.send(GW, wire.frame(MsgType.INIT_ACK, wire.lp(ack_bytes) + sig))

    # -- SM initialization ----------------------------------------------------

    def _open(self, kind: MsgType, body: bytes) -> bytes:
        m = self._e.memory
        if m["phase"] != "established":
            raise ProtocolError(AlarmKind.UNKNOWN, f"{kind.name} before session")
        try:
            env = wire.decode_only_env(body, wire.aad_for(kind))
            return crypto.ae_decrypt(m["k_in"], env)
        except (AuthFailure, WireError):
            raise ProtocolError(AlarmKind.TAMPER, f"{kind.name} failed authentication")

    def _seal_out(self, kind: MsgType, plaintext: bytes) -> bytes:
        env = crypto.ae_encrypt(self._e.memory["k_out"], plaintext, wire.aad_for(kind))
        return wire.frame(kind, env.encode())

    def _on_get_init_key(self, body: bytes, ctx: Context) -> None:
        pt = self._open(MsgType.GET_INIT_KEY, body)
        if len(pt) != 8 + 16:
            raise ProtocolError(AlarmKind.TAMPER, "getInitKey payload")
        meter_id = wire.read_u64(pt)
        req = pt[8:]
        keyring: MerkleKeyStore = self._e.memory["keyring"]
        key = b"\x00" * 16
        try:
            key = keyring.get_and_void(meter_id).material
            status = STATUS_OK
        except AlreadyVoid:
            status = STATUS_VOID
            ctx.alarm(AlarmKind.DOUBLE_REG, meter_id, "cc: AlreadyVoid, init key was used before")
        except KeyNotFound:
            status = STATUS_UNKNOWN
            ctx.alarm(AlarmKind.UNKNOWN, meter_id, "cc: no init key for meter")
        except IntegrityError as e:
            status = STATUS_INTEGRITY
            ctx.alarm(AlarmKind.ROLLBACK, meter_id, f"cc: keyring integrity: {e}")
        out = wire.u64(meter_id) + req + bytes([status]) + key
        ctx.send(GW, self._seal_out(MsgType.INIT_KEY, out))

    # -- periodic outputs ------------------------------------------------------

    def process_window(self, body: bytes, ctx: Context) -> Optional[bytes]:
        """Check one forwarded window; return the ack message or None."""
        m = self._e.memory
        if body == m["win_last_bytes"]:
            return m["win_last_ack"]
        pt = self._open(MsgType.WINDOW, body)
        seq = wire.read_u64(pt)
        records = [wire.decode_record(t, v) for t, v in wire.parse_tlvs(pt[8:])]
        last = m["win_last"]
        if seq <= last:
            raise ProtocolError(AlarmKind.REPLAY, f"window seq {seq} <= {last}")
        if seq != last + 1:
            ctx.alarm(AlarmKind.FRESHNESS, None, f"cc: window seq gap {last} -> {seq}")
        for rec in records:
            ctx.observe("cc_output", seq=seq, **rec)
            ctx.note("cc_output", seq=seq, **rec)
        ack = self._seal_out(MsgType.WINDOW_ACK, wire.u64(seq))
        m.update(win_last=seq, win_last_bytes=body, win_last_ack=ack)
        return ack

    def _on_window(self, body: bytes, ctx: Context) -> None:
        ack = self.process_window(body, ctx)
        if ack is not None:
            ctx.send(GW, ack)

    def _on_time_req(self, body: bytes, ctx: Context) -> None:
        challenge = self._open(MsgType.TIME_REQ, body)
        if len(challenge) != 16:
            raise ProtocolError(AlarmKind.TAMPER, "time request payload")
        out = challenge + struct.pack(">Q", ctx.wall_time())
        ctx.send(GW, self._seal_out(MsgType.TIME_RESP, out))


class ControlCenter:
    """Untrusted control-center host. Owns the disk, relays to the enclave."""

    name = CC

    def __init__(
        self,
        ids: Identities,
        attestation: AttestationService,
        root_seal_secret: bytes,
        rng: crypto.Randomness,
        timeouts: Timeouts = Timeouts(),
        init_keys: Iterable[tuple[int, bytes]] = (),
    ) -> None:
        self.store = VersionedStore()
        self.enclave = ControlEnclave(self, ids, attestation, root_seal_secret, rng, timeouts, init_keys)
        self.down = False

    def receive(self, src: str, data: bytes, ctx: Context) -> None:
        self.enclave.handle(src, data, ctx)

    def on_timer(self, token: tuple, ctx: Context) -> None:
        self.enclave.on_timer(token, ctx)
