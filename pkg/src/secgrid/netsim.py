"""Deterministic discrete-event message bus.

One global tick (one simulated second). Nodes are objects with
``receive(src, data, ctx)`` and ``on_timer(token, ctx)``. Every send passes
through an optional interposer (the adversary), which sees the wire bytes
and decides what is actually delivered and when. Channels stay FIFO: a
delayed message holds back later messages on the same (src, dst) pair.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Protocol

from .protocols.common import AlarmKind
from .wire import MsgType


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    data: bytes
    tick: int
    ordinal: int  # 1-based count of earlier messages with the same (src, dst, type)

    @property
    def type_code(self) -> Optional[int]:
        return self.data[0] if self.data else None

    @property
    def type_name(self) -> str:
        code = self.type_code
        try:
            return MsgType(code).name
        except ValueError:
            return f"0x{code:02x}" if code is not None else "empty"


@dataclass(frozen=True)
class AlarmEvent:
    tick: int
    source: str
    kind: AlarmKind
    meter_id: Optional[int]
    detail: str = ""


def digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


class EventLog:
    """Append-only list of JSON-able events."""

    def __init__(self) -> None:
        self.events: list[dict] = []

    def add(self, tick: int, kind: str, **fields: Any) -> None:
        fields.update(tick=tick, kind=kind)
        self.events.append(fields)

    def of_kind(self, kind: str) -> list[dict]:
        return [e for e in self.events if e["kind"] == kind]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def __len__(self) -> int:
        return len(self.events)


class Interposer(Protocol):
    def intercept(self, msg: Message, sim: "Simulator") -> list[tuple[bytes, int]]:
        """Return (bytes, extra_delay) pairs to deliver; [] drops the message."""

    def install(self, sim: "Simulator") -> None: ...


class Node(Protocol):
    name: str

    def receive(self, src: str, data: bytes, ctx: "NodeContext") -> None: ...

    def on_timer(self, token: tuple, ctx: "NodeContext") -> None: ...


class Clock:
    """Global tick plus the two wall-clock views.

    ``wall`` is the true time (used by the control enclave, whose platform
    clock is trusted). ``host`` is what an untrusted OS reports and may be
    shifted by the adversary; no enclave reads it after initialization.
    """

    def __init__(self, epoch: int) -> None:
        self.epoch = epoch
        self.tick = 0
        self.host_offset = 0

    def wall(self) -> int:
        return self.epoch + self.tick

    def host(self) -> int:
        return self.epoch + self.tick + self.host_offset


class NodeContext:
    """The view a node gets while handling one event."""

    def __init__(self, sim: "Simulator", name: str) -> None:
        self._sim = sim
        self.name = name
        self.tick = sim.clock.tick

    def send(self, dst: str, data: bytes) -> None:
        self._sim.send(self.name, dst, data)

    def set_timer(self, delay: int, token: tuple) -> None:
        self._sim.set_timer(self.name, delay, token)

    def alarm(self, kind: AlarmKind, meter_id: Optional[int], detail: str = "") -> None:
        self._sim.raise_alarm(self.name, kind, meter_id, detail)

    def note(self, kind: str, **fields: Any) -> None:
        fields.setdefault("node", self.name)
        self._sim.log.add(self.tick, kind, **fields)

    def observe(self, kind: str, **fields: Any) -> None:
        self._sim.observations.append((self.tick, kind, fields))

    def wall_time(self) -> int:
        return self._sim.clock.wall()

    def host_time(self) -> int:
        return self._sim.clock.host()


@dataclass(order=True)
class _Event:
    tick: int
    seq: int
    action: Callable[[], None] = field(compare=False)


class Simulator:
    def __init__(
        self,
        epoch: int = 0,
        latency: int = 1,
        interposer: Optional[Interposer] = None,
        jitter: Optional[Callable[[], int]] = None,
    ) -> None:
        self.clock = Clock(epoch)
        self.latency = latency
        self.jitter = jitter
        self.nodes: dict[str, Node] = {}
        self.log = EventLog()
        self.observations: list[tuple[int, str, dict]] = []
        self.alarms: list[AlarmEvent] = []
        self.wire: list[Message] = []
        self._queue: list[_Event] = []
        self._seq = 0
        self._ordinals: dict[tuple, int] = {}
        self._channel_tail: dict[tuple[str, str], int] = {}
        self.interposer = interposer
        if interposer is not None:
            interposer.install(self)

    def add(self, node: Node) -> Node:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name}")
        self.nodes[node.name] = node
        return node

    def context(self, name: str) -> NodeContext:
        return NodeContext(self, name)

    # -- scheduling -----------------------------------------------------------

    def at(self, tick: int, action: Callable[[], None]) -> None:
        if tick < self.clock.tick:
            raise ValueError("cannot schedule in the past")
        self._seq += 1
        heapq.heappush(self._queue, _Event(tick, self._seq, action))

    def call(self, tick: int, name: str, fn: Callable[[NodeContext], None]) -> None:
        """Run ``fn`` as node ``name`` at ``tick``."""
        self.at(tick, lambda: fn(self.context(name)))

    def set_timer(self, name: str, delay: int, token: tuple) -> None:
        self.at(self.clock.tick + max(0, delay), lambda: self.nodes[name].on_timer(token, self.context(name)))

    # -- messaging ------------------------------------------------------------

    def send(self, src: str, dst: str, data: bytes) -> None:
        key = (src, dst, data[0] if data else None)
        self._ordinals[key] = self._ordinals.get(key, 0) + 1
        msg = Message(src, dst, bytes(data), self.clock.tick, self._ordinals[key])
        self.wire.append(msg)
        self.log.add(
            msg.tick, "send", src=src, dst=dst, type=msg.type_name, ordinal=msg.ordinal,
            digest=digest(msg.data), size=len(msg.data),
        )
        deliveries = [(msg.data, 0)] if self.interposer is None else self.interposer.intercept(msg, self)
        for data_out, extra in deliveries:
            self.inject(src, dst, data_out, extra)

    def inject(self, src: str, dst: str, data: bytes, extra_delay: int = 0) -> None:
        """Put bytes on the (src, dst) channel without logging a send."""
        lat = self.latency + (self.jitter() if self.jitter else 0) + extra_delay
        when = max(self.clock.tick + lat, self._channel_tail.get((src, dst), 0))
        self._channel_tail[(src, dst)] = when
        self.at(when, lambda: self._deliver(src, dst, data))

    def _deliver(self, src: str, dst: str, data: bytes) -> None:
        node = self.nodes.get(dst)
        self.log.add(self.clock.tick, "deliver", src=src, dst=dst, digest=digest(data))
        if node is None:
            self.log.add(self.clock.tick, "undeliverable", src=src, dst=dst)
            return
        node.receive(src, data, self.context(dst))

    def raise_alarm(self, source: str, kind: AlarmKind, meter_id: Optional[int], detail: str) -> None:
        ev = AlarmEvent(self.clock.tick, source, kind, meter_id, detail)
        self.alarms.append(ev)
        self.log.add(ev.tick, "alarm", src=source, alarm=kind.label, meter_id=meter_id, detail=detail)

    # -- running --------------------------------------------------------------

    def step(self) -> bool:
        if not self._queue:
            return False
        ev = heapq.heappop(self._queue)
        self.clock.tick = ev.tick
        ev.action()
        return True

    def run(self, until: Optional[int] = None, max_events: int = 10_000_000) -> int:
        """Process events up to and including tick ``until`` (or until idle)."""
        n = 0
        while self._queue and (until is None or self._queue[0].tick <= until):
            self.step()
            n += 1
            if n >= max_events:
                raise RuntimeError("event budget exhausted")
        if until is not None and self.clock.tick < until:
            self.clock.tick = until
        return n

    @property
    def idle(self) -> bool:
        return not self._queue
