"""Scenario configuration, world construction and the protocol drivers.

Config files are INI with a single ``[scenario]`` section. Every key is
optional; defaults are listed in :class:`ScenarioConfig`. Example::

    [scenario]
    meters = 5
    periods = 10
    seed = 7
    peak_windows = 1020-1260
    cpp_days = 19676:150:120:960-1320
    restart_crash_at = 4000
    restart_boot_at = 4950

Lists use commas. ``cpp_days`` entries are ``day:p:delta_p:start-end[/start-end]``
separated by ``;``. ``reregister`` entries are ``meter@tick`` and re-run
meter registration at that tick (a double-registration attempt).
"""
from __future__ import annotations

import configparser
import hashlib
import hmac
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Iterable, Optional

from . import crypto
from .adversary import Action, Adversary, parse_script
from .enclave import AttestationService
from .functions import CppCalendar, RtpParams, StsModel, TouParams
from .netsim import AlarmEvent, EventLog, Simulator
from .protocols.common import AlarmKind, Identities, Schedule, Timeouts
from .protocols.control import ControlCenter
from .protocols.gateway import Gateway, GatewayEnclave, GridConfig
from .protocols.meter import SmartMeter, UserDevice
from .wire import MsgType

LOCAL_LINK = {MsgType.INIT_TRIGGER, MsgType.INIT}  # SM <-> UD, not the WAN


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _windows(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in text.replace("/", ",").split(","):
        if part.strip():
            a, b = part.split("-")
            out.append((int(a), int(b)))
    return tuple(out)


@dataclass
class ScenarioConfig:
    meters: int = 5
    periods: int = 10
    interval: int = 900
    first_period: int = 900
    window_close: int = 600
    seed: int = 1
    epoch: int = 1699920000  # 2023-11-14T00:00:00Z, a midnight
    latency: int = 1
    jitter: int = 0
    retransmit: int = 30
    max_retries: int = 4
    protocol_timeout: int = 60
    time_tolerance: int = 5
    init_at: int = 0
    register_at: int = 10
    reading_min: int = 0
    reading_max: int = 2000
    sentinel: bool = False
    tou_price: int = 120
    tou_surcharge: int = 80
    peak_windows: str = "1020-1260"
    cpp_days: str = ""
    rtp_m0: int = 1000
    rtp_a: str = "100"
    rtp_b: str = "180"
    rtp_k: str = "1/2,3/10,1/5"
    sts_phi: str = "1"
    sts_sigma: float = 0.0
    restart_crash_at: Optional[int] = None
    restart_boot_at: Optional[int] = None
    reregister: str = ""

    # -- parsing --------------------------------------------------------------

    @classmethod
    def from_ini(cls, text: str) -> "ScenarioConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";;"))
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        if not cp.has_section("scenario"):
            raise ConfigError("missing [scenario] section")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in cp.items("scenario"):
            if key not in known:
                raise ConfigError(f"unknown key {key!r}")
            default = getattr(cls(), key)
            try:
                if isinstance(default, bool):
                    value = cp.getboolean("scenario", key)
                elif isinstance(default, float):
                    value = float(raw)
                elif isinstance(default, int) or default is None:
                    value = int(raw)
                else:
                    value = raw.strip()
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.meters < 1:
            raise ConfigError("meters must be >= 1")
        if self.periods < 1:
            raise ConfigError("periods must be >= 1")
        if not 0 < self.window_close < self.interval:
            raise ConfigError("window_close must lie inside the interval")
        if self.retransmit * self.max_retries >= self.window_close:
            raise ConfigError("retransmissions must finish before the window closes")
        if self.reading_min < 0 or self.reading_max <= self.reading_min:
            raise ConfigError("bad reading range")
        if self.latency < 1 or self.jitter < 0:
            raise ConfigError("latency must be >= 1 and jitter >= 0")
        if (self.restart_crash_at is None) != (self.restart_boot_at is None):
            raise ConfigError("restart needs both crash and boot ticks")
        if self.restart_crash_at is not None and self.restart_boot_at <= self.restart_crash_at:
            raise ConfigError("boot must follow crash")
        try:
            self.grid()
            self.reregistrations()
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(str(e)) from None

    # -- derived objects --------------------------------------------------------

    def schedule(self) -> Schedule:
        return Schedule(self.first_period, self.interval, self.periods, self.window_close)

    def timeouts(self) -> Timeouts:
        return Timeouts(self.retransmit, self.max_retries, self.protocol_timeout, self.time_tolerance)

    def _hourly(self, text: str) -> tuple[int, ...]:
        vals = _ints(text)
        if len(vals) == 1:
            return vals * 24
        if len(vals) != 24:
            raise ValueError("hourly RTP parameters need 1 or 24 values")
        return vals

    def grid(self) -> GridConfig:
        base = TouParams(self.tou_price, self.tou_surcharge, _windows(self.peak_windows))
        events = {}
        for entry in filter(None, (e.strip() for e in self.cpp_days.split(";"))):
            day, p, dp, wins = entry.split(":")
            if int(day) in events:
                raise ValueError(f"duplicate CPP day {day}")
            events[int(day)] = TouParams(int(p), int(dp), _windows(wins))
        k = tuple(Fraction(x) for x in self.rtp_k.split(","))
        phi = tuple(Fraction(x) for x in self.sts_phi.split(","))
        return GridConfig(
            tou=base,
            cpp=CppCalendar(events),
            rtp=RtpParams(self.rtp_m0, {}, {}, k),
            rtp_default_a=self._hourly(self.rtp_a),
            rtp_default_b=self._hourly(self.rtp_b),
            sts=StsModel(phi, self.sts_sigma, self.seed),
        )

    def reregistrations(self) -> list[tuple[int, int]]:
        out = []
        for part in filter(None, (p.strip() for p in self.reregister.split(","))):
            mid, tick = part.split("@")
            if not 1 <= int(mid) <= self.meters:
                raise ValueError(f"reregister names unknown meter {mid}")
            out.append((int(mid), int(tick)))
        return out

    def meter_ids(self) -> list[int]:
        return list(range(1, self.meters + 1))

    def reading(self, meter_id: int, period: int) -> int:
        h = hmac.new(
            self.seed.to_bytes(8, "big"), b"reading" + meter_id.to_bytes(8, "big") + period.to_bytes(8, "big"),
            hashlib.sha256,
        ).digest()
        x = int.from_bytes(h[:8], "big")
        if self.sentinel:
            return (1 << 40) + x % (1 << 40)
        return self.reading_min + x % (self.reading_max - self.reading_min)

    def end_tick(self) -> int:
        return self.schedule().window_close_tick(self.periods) + 10 * self.retransmit * (self.max_retries + 1)


class World:
    """Every entity of one simulated deployment, wired to one simulator."""

    def __init__(self, cfg: ScenarioConfig, actions: Iterable[Action] = ()) -> None:
        self.cfg = cfg
        root = crypto.Drbg(cfg.seed.to_bytes(8, "big"), b"scenario")
        jitter_rng = root.child(b"jitter")
        jitter = (lambda: crypto.rand_u64(jitter_rng) % (cfg.jitter + 1)) if cfg.jitter else None
        self.adversary = Adversary(actions)
        self.sim = Simulator(cfg.epoch, cfg.latency, self.adversary, jitter)
        attestation = AttestationService(root.child(b"attestation"))
        self.ids = Identities(attestation_root=attestation.root_public_key)
        timeouts, schedule, grid = cfg.timeouts(), cfg.schedule(), cfg.grid()
        key_rng = root.child(b"init-keys")
        self.init_keys = {mid: key_rng.bytes(crypto.KEY_BYTES) for mid in cfg.meter_ids()}
        self.cc = self.sim.add(
            ControlCenter(
                self.ids, attestation, root.bytes(32), root.child(b"cc"), timeouts, self.init_keys.items()
            )
        )
        gw_seal = root.bytes(32)
        gw_rng = root.child(b"gw")

        def factory(host: Gateway, generation: int) -> GatewayEnclave:
            return GatewayEnclave(
                host, generation, self.ids, attestation, gw_seal,
                gw_rng.child(b"boot/%d" % generation), timeouts, schedule, grid,
            )

        self.gw = self.sim.add(Gateway(factory))
        self.meters: dict[int, SmartMeter] = {}
        self.devices: dict[int, UserDevice] = {}
        for mid in cfg.meter_ids():
            self.meters[mid] = self.sim.add(
                SmartMeter(mid, self.init_keys[mid], cfg.reading, root.child(b"sm/%d" % mid), schedule, timeouts)
            )
            self.devices[mid] = self.sim.add(UserDevice(mid, self.ids, root.child(b"ud/%d" % mid), timeouts))

    # -- scripted events --------------------------------------------------------

    def schedule_boot(self, tick: int, restore: bool = False) -> None:
        self.sim.call(tick, self.gw.name, lambda ctx: self.gw.boot(ctx, restore))

    def schedule_registration(self, meter_id: int, tick: int) -> None:
        ud = self.devices[meter_id]
        self.sim.call(tick, ud.name, ud.start)

    def schedule_crash(self, tick: int) -> None:
        def crash(ctx) -> None:
            self.gw.crash()
            ctx.note("gw_crash")

        self.sim.call(tick, self.gw.name, crash)

    # -- results ----------------------------------------------------------------

    def network_messages(self, since: int = 0, until: Optional[int] = None) -> Counter:
        c = Counter()
        for m in self.sim.wire:
            if m.tick >= since and (until is None or m.tick <= until) and m.type_code not in LOCAL_LINK:
                c[m.type_name] += 1
        return c


@dataclass
class SimResult:
    config: ScenarioConfig
    world: World
    log: EventLog
    alarms: list[AlarmEvent]
    accepted: dict[int, list[tuple[int, int]]]
    sent: dict[int, list[tuple[int, int]]]
    outputs: list[dict]

    @property
    def total_accepted(self) -> int:
        return sum(len(v) for v in self.accepted.values())

    def alarm_counts(self) -> Counter:
        return Counter(a.kind.label for a in self.alarms)

    def aggregates(self) -> list[tuple[int, int]]:
        return [(o["period"], o["total"]) for o in self.outputs if o["type"] == "agg"]

    def aggregate_total(self) -> int:
        return sum(t for _, t in self.aggregates())

    def summary(self) -> str:
        lines = [
            f"meters={self.config.meters} periods={self.config.periods} seed={self.config.seed}",
            f"accepted reports: {self.total_accepted}",
            f"alarms: {len(self.alarms)}"
            + ("" if not self.alarms else " (" + ", ".join(f"{k}={v}" for k, v in sorted(self.alarm_counts().items())) + ")"),
            f"windows delivered to control center: {len(self.aggregates())}",
            f"aggregate total (Wh): {self.aggregate_total()}",
        ]
        for a in self.alarms:
            mid = "-" if a.meter_id is None else a.meter_id
            lines.append(f"  alarm t={a.tick} {a.kind.label} meter={mid} at {a.source}: {a.detail}")
        return "\n".join(lines) + "\n"


def collect(world: World) -> SimResult:
    accepted: dict[int, list] = defaultdict(list)
    sent: dict[int, list] = defaultdict(list)
    outputs = []
    for _, kind, f in world.sim.observations:
        if kind == "accept":
            accepted[f["meter_id"]].append((f["ctr"], f["reading"]))
        elif kind == "sent":
            sent[f["meter_id"]].append((f["ctr"], f["reading"]))
        elif kind == "cc_output":
            outputs.append(dict(f))
    return SimResult(
        world.cfg, world, world.sim.log, list(world.sim.alarms), dict(accepted), dict(sent), outputs
    )


def run_scenario(
    cfg: ScenarioConfig,
    script: Iterable[Action] | str = (),
    seed: Optional[int] = None,
    *,
    strict: bool = True,
) -> SimResult:
    """Run one deployment from boot to the last window.

    ``strict`` makes a script action that never matched raise
    :class:`~secgrid.adversary.VacuousAction`.
    """
    if seed is not None:
        cfg = ScenarioConfig(**{**cfg.__dict__, "seed": seed})
    cfg.validate()
    actions = parse_script(script) if isinstance(script, str) else list(script)
    world = World(cfg, actions)
    world.sim.log.add(0, "header", dh_group=crypto.DH_GROUP, seed=cfg.seed, meters=cfg.meters, periods=cfg.periods)
    world.schedule_boot(cfg.init_at)
    for mid in cfg.meter_ids():
        world.schedule_registration(mid, cfg.register_at)
    for mid, tick in cfg.reregistrations():
        world.schedule_registration(mid, tick)
    if cfg.restart_crash_at is not None:
        world.schedule_crash(cfg.restart_crash_at)
        world.schedule_boot(cfg.restart_boot_at, restore=True)
    world.sim.run(until=cfg.end_tick())
    if strict:
        world.adversary.check_fired()
    return collect(world)


# --------------------------------------------------------------------------
# protocol drivers: run one protocol to completion on a world


@dataclass
class DriverResult:
    ok: bool
    messages: Counter
    alarms: list[AlarmEvent] = field(default_factory=list)

    @property
    def message_count(self) -> int:
        return sum(self.messages.values())


def _drive(world: World, start: int, settle: int) -> tuple[Counter, list[AlarmEvent]]:
    n_alarms = len(world.sim.alarms)
    world.sim.run(until=start + settle)
    return world.network_messages(since=start), world.sim.alarms[n_alarms:]


def gw_cc_init(world: World, at: Optional[int] = None) -> DriverResult:
    """Boot the gateway enclave and run attestation, key exchange and time sync."""
    start = world.sim.clock.tick if at is None else at
    world.schedule_boot(start)
    msgs, alarms = _drive(world, start, world.cfg.protocol_timeout + 5)
    established = world.gw.enclave.phase == "established" and world.cc.enclave.phase == "established"
    return DriverResult(established, msgs, alarms)


def sm_init(world: World, meter_id: int, at: Optional[int] = None) -> DriverResult:
    """Register one meter through its user device."""
    start = world.sim.clock.tick if at is None else at
    world.schedule_registration(meter_id, start)
    msgs, alarms = _drive(world, start, world.cfg.protocol_timeout + 5)
    ok = world.devices[meter_id].state == "done" and world.meters[meter_id].registered and not alarms
    return DriverResult(ok, msgs, alarms)


def gw_restart(world: World, down_for: int = 0, at: Optional[int] = None) -> DriverResult:
    """Crash the gateway enclave, then boot a fresh instance that restores."""
    start = world.sim.clock.tick if at is None else at
    world.schedule_crash(start)
    world.schedule_boot(start + down_for, restore=True)
    msgs, alarms = _drive(world, start, down_for + world.cfg.protocol_timeout + 5)
    ok = world.gw.enclave is not None and world.gw.enclave.phase == "established"
    return DriverResult(ok and not alarms, msgs, alarms)


def sentinel_scan(result: SimResult) -> list[int]:
    """Readings whose 8-byte encoding appears on the wire, on disk or in the log."""
    blobs = [m.data for m in result.world.sim.wire]
    for node in (result.world.gw, result.world.cc):
        blobs.extend(node.store.all_bytes())
    haystack = b"\x00".join(blobs)
    text = result.log.to_jsonl()
    leaks = []
    for rows in result.sent.values():
        for _, reading in rows:
            if reading.to_bytes(8, "big") in haystack or str(reading) in text:
                leaks.append(reading)
    return leaks


__all__ = [
    "AlarmKind",
    "ConfigError",
    "DriverResult",
    "ScenarioConfig",
    "SimResult",
    "World",
    "gw_cc_init",
    "gw_restart",
    "run_scenario",
    "sentinel_scan",
    "sm_init",
]
