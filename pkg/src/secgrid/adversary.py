"""Network and storage adversary.

Implements the threat model's action set: read everything on the wire,
drop, delay, modify or replay messages, and serve stale versions of
anything the hosts keep on disk. It never touches enclave memory or keys.

Scripts are plain text, one action per line, ``#`` starts a comment::

    drop     src=sm/3 dst=gw type=REPORT ordinal=4 [count=1]
    replay   src=sm/3 dst=gw type=REPORT ordinal=4 [after=5]
    tamper   src=sm/3 dst=gw type=REPORT ordinal=2 bit=100
    delay    src=gw dst=cc type=TIME_CONFIRM ordinal=1 ticks=10
    rollback node=gw label=meter/3/session at=5390 [steps=1 | version=2]
    skew     at=100 seconds=86400

Omitted selector fields match anything; ``ordinal`` counts matches of the
selector itself (1-based).
"""
from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .netsim import Message, Simulator, digest
from .wire import MsgType


class ScriptError(ValueError):
    pass


class VacuousAction(AssertionError):
    """A scripted action never matched anything."""


@dataclass(frozen=True)
class Selector:
    src: Optional[str] = None
    dst: Optional[str] = None
    type: Optional[MsgType] = None
    ordinal: int = 1

    def matches(self, msg: Message) -> bool:
        return (
            (self.src is None or msg.src == self.src)
            and (self.dst is None or msg.dst == self.dst)
            and (self.type is None or msg.type_code == self.type)
        )

    def describe(self) -> str:
        t = self.type.name if self.type is not None else "*"
        return f"{self.src or '*'}->{self.dst or '*'} {t} #{self.ordinal}"


@dataclass
class Action:
    fired: int = field(default=0, init=False)

    def describe(self) -> str:
        return type(self).__name__


@dataclass
class MessageAction(Action):
    selector: Selector = field(default_factory=Selector)
    seen: int = field(default=0, init=False)

    def hit(self, msg: Message, span: int = 1) -> bool:
        """Count a selector match; True when it falls in [ordinal, ordinal+span)."""
        if not self.selector.matches(msg):
            return False
        self.seen += 1
        return self.selector.ordinal <= self.seen < self.selector.ordinal + span

    def describe(self) -> str:
        return f"{type(self).__name__}({self.selector.describe()})"


@dataclass
class Drop(MessageAction):
    count: int = 1


@dataclass
class Replay(MessageAction):
    after: int = 5


@dataclass
class Tamper(MessageAction):
    bit: int = 0


@dataclass
class Delay(MessageAction):
    ticks: int = 10


@dataclass
class RollbackStore(Action):
    node: str = "gw"
    label: str = ""
    at: int = 0
    steps: Optional[int] = 1
    version: Optional[int] = None

    def describe(self) -> str:
        target = f"v{self.version}" if self.version is not None else f"-{self.steps}"
        return f"RollbackStore({self.node}:{self.label} {target} @{self.at})"


@dataclass
class SkewHostClock(Action):
    at: int = 0
    seconds: int = 0


def flip_bit(data: bytes, bit: int) -> bytes:
    if not data:
        return data
    bit %= len(data) * 8
    out = bytearray(data)
    out[bit // 8] ^= 0x80 >> (bit % 8)
    return bytes(out)


class Adversary:
    """Interposer that executes a script against one simulation."""

    def __init__(self, actions: Iterable[Action] = ()) -> None:
        self.actions = list(actions)
        self.recorded: list[Message] = []

    def install(self, sim: Simulator) -> None:
        for a in self.actions:
            if isinstance(a, RollbackStore):
                sim.at(a.at, lambda a=a: self._rollback(a, sim))
            elif isinstance(a, SkewHostClock):
                sim.at(a.at, lambda a=a: self._skew(a, sim))

    def intercept(self, msg: Message, sim: Simulator) -> list[tuple[bytes, int]]:
        self.recorded.append(msg)
        out = [(msg.data, 0)]
        for a in self.actions:
            if isinstance(a, Drop) and a.hit(msg, a.count):
                a.fired += 1
                sim.log.add(sim.clock.tick, "drop", src=msg.src, dst=msg.dst, digest=digest(msg.data))
                return []
            if isinstance(a, Tamper) and a.hit(msg):
                a.fired += 1
                data = flip_bit(out[0][0], a.bit)
                sim.log.add(sim.clock.tick, "tamper", src=msg.src, dst=msg.dst, bit=a.bit, digest=digest(data))
                out = [(data, out[0][1])]
            elif isinstance(a, Delay) and a.hit(msg):
                a.fired += 1
                sim.log.add(sim.clock.tick, "delay", src=msg.src, dst=msg.dst, ticks=a.ticks)
                out = [(out[0][0], out[0][1] + a.ticks)]
            elif isinstance(a, Replay) and a.hit(msg):
                a.fired += 1
                sim.at(sim.clock.tick + a.after, lambda m=msg: self._replay(m, sim))
        return out

    def _replay(self, msg: Message, sim: Simulator) -> None:
        sim.log.add(sim.clock.tick, "replay", src=msg.src, dst=msg.dst, digest=digest(msg.data))
        sim.inject(msg.src, msg.dst, msg.data)

    def _rollback(self, a: RollbackStore, sim: Simulator) -> None:
        store = sim.nodes[a.node].store
        current = store.version(a.label)
        target = a.version if a.version is not None else current - (a.steps or 0)
        if current == 0 or not 1 <= target < current:
            sim.log.add(sim.clock.tick, "rollback_skipped", node=a.node, label=a.label, current=current)
            return
        store.rollback(a.label, target)
        a.fired += 1
        sim.log.add(sim.clock.tick, "rollback", node=a.node, label=a.label, to_version=target, was=current)

    def _skew(self, a: SkewHostClock, sim: Simulator) -> None:
        sim.clock.host_offset += a.seconds
        a.fired += 1
        sim.log.add(sim.clock.tick, "skew", seconds=a.seconds)

    def check_fired(self) -> None:
        dead = [a.describe() for a in self.actions if not a.fired]
        if dead:
            raise VacuousAction("actions matched nothing: " + ", ".join(dead))


# --------------------------------------------------------------------------
# script builders


def inject_drop(script: list, selector: Selector, count: int = 1) -> list:
    script.append(Drop(selector=selector, count=count))
    return script


def inject_replay(script: list, selector: Selector, after: int = 5) -> list:
    script.append(Replay(selector=selector, after=after))
    return script


def inject_tamper(script: list, selector: Selector, bit: int) -> list:
    script.append(Tamper(selector=selector, bit=bit))
    return script


def inject_delay(script: list, selector: Selector, ticks: int) -> list:
    script.append(Delay(selector=selector, ticks=ticks))
    return script


def inject_rollback(
    script: list, label: str, at: int, steps: Optional[int] = 1, version: Optional[int] = None, node: str = "gw"
) -> list:
    script.append(RollbackStore(node=node, label=label, at=at, steps=steps, version=version))
    return script


# --------------------------------------------------------------------------
# script text format


def _selector(kv: dict) -> Selector:
    t = kv.pop("type", None)
    try:
        mtype = MsgType[t] if t is not None else None
    except KeyError:
        raise ScriptError(f"unknown message type {t!r}") from None
    return Selector(kv.pop("src", None), kv.pop("dst", None), mtype, int(kv.pop("ordinal", 1)))


_PARSERS: dict[str, Callable[[dict], Action]] = {
    "drop": lambda kv: Drop(selector=_selector(kv), count=int(kv.pop("count", 1))),
    "replay": lambda kv: Replay(selector=_selector(kv), after=int(kv.pop("after", 5))),
    "tamper": lambda kv: Tamper(selector=_selector(kv), bit=int(kv.pop("bit"))),
    "delay": lambda kv: Delay(selector=_selector(kv), ticks=int(kv.pop("ticks"))),
    "rollback": lambda kv: RollbackStore(
        node=kv.pop("node", "gw"),
        label=kv.pop("label"),
        at=int(kv.pop("at")),
        steps=int(kv.pop("steps")) if "steps" in kv else (None if "version" in kv else 1),
        version=int(kv.pop("version")) if "version" in kv else None,
    ),
    "skew": lambda kv: SkewHostClock(at=int(kv.pop("at")), seconds=int(kv.pop("seconds"))),
}


def parse_script(text: str) -> list[Action]:
    actions = []
    for lineno, line in enumerate(text.splitlines(), 1):
        words = shlex.split(line, comments=True)
        if not words:
            continue
        verb, rest = words[0].lower(), words[1:]
        if verb not in _PARSERS:
            raise ScriptError(f"line {lineno}: unknown action {verb!r}")
        try:
            kv = dict(w.split("=", 1) for w in rest)
        except ValueError:
            raise ScriptError(f"line {lineno}: expected key=value pairs") from None
        try:
            action = _PARSERS[verb](kv)
        except (KeyError, ValueError) as e:
            raise ScriptError(f"line {lineno}: {e}") from None
        if kv:
            raise ScriptError(f"line {lineno}: unexpected keys {sorted(kv)}")
        actions.append(action)
    return actions
