import json

import pytest

import attack_space
from secgrid.adversary import (
    Adversary,
    Delay,
    Drop,
    Replay,
    RollbackStore,
    ScriptError,
    Selector,
    SkewHostClock,
    Tamper,
    VacuousAction,
    flip_bit,
    inject_delay,
    inject_drop,
    inject_replay,
    inject_rollback,
    inject_tamper,
    parse_script,
)
from secgrid.netsim import EventLog, Simulator
from secgrid.protocols.common import AlarmKind
from secgrid.scenario import ScenarioConfig, run_scenario
from secgrid.wire import MsgType

SMALL = ScenarioConfig(meters=3, periods=5)


class Sink:
    def __init__(self, name):
        self.name = name
        self.got = []

    def receive(self, src, data, ctx):
        self.got.append((ctx.tick, src, data))

    def on_timer(self, token, ctx):
        pass


# -- simulator ------------------------------------------------------------------


def test_fifo_per_channel_under_delay():
    adv = Adversary([Delay(selector=Selector("a", "b", None, 1), ticks=10)])
    sim = Simulator(0, 1, adv)
    sink = sim.add(Sink("b"))
    sim.add(Sink("a"))
    for i in range(5):
        sim.send("a", "b", bytes([0x10, i]))
    sim.run()
    assert [d[1] for _, _, d in sink.got] == [0, 1, 2, 3, 4]


def test_fifo_per_channel_under_jitter():
    vals = iter([9, 0, 5, 0, 0, 3, 0, 0])
    sim = Simulator(0, 1, None, lambda: next(vals))
    sink = sim.add(Sink("b"))
    for i in range(8):
        sim.send("a", "b", bytes([0x10, i]))
    sim.run()
    assert [d[1] for _, _, d in sink.got] == list(range(8))


def test_ordinals_count_per_type():
    sim = Simulator()
    sim.add(Sink("b"))
    for t in (0x10, 0x11, 0x10):
        sim.send("a", "b", bytes([t]))
    assert [(m.type_code, m.ordinal) for m in sim.wire] == [(0x10, 1), (0x11, 1), (0x10, 2)]


def test_undeliverable_is_logged():
    sim = Simulator()
    sim.send("a", "nobody", b"\x10")
    sim.run()
    assert sim.log.of_kind("undeliverable")


def test_cannot_schedule_in_the_past():
    sim = Simulator()
    sim.run(until=10)
    with pytest.raises(ValueError):
        sim.at(5, lambda: None)


def test_event_log_jsonl():
    log = EventLog()
    log.add(3, "send", src="a", dst="b", digest="ab")
    line = log.to_jsonl()
    assert line.endswith("\n") and json.loads(line) == {"tick": 3, "kind": "send", "src": "a", "dst": "b", "digest": "ab"}


def test_scenario_log_has_required_fields():
    res = run_scenario(ScenarioConfig(meters=2, periods=2), "replay src=sm/1 dst=gw type=REPORT ordinal=1 after=950")
    events = [json.loads(x) for x in res.log.to_jsonl().splitlines()]
    sends = [e for e in events if e["kind"] == "send"]
    assert sends and all({"tick", "src", "dst", "digest", "type"} <= e.keys() for e in sends)
    alarms = [e for e in events if e["kind"] == "alarm"]
    assert len(alarms) == len(res.alarms) == 1
    assert alarms[0]["alarm"] == "Replay" and alarms[0]["meter_id"] == 1


# -- determinism and honesty ------------------------------------------------------


def test_identical_inputs_identical_log():
    script = "drop src=gw dst=sm/2 type=REPORT_RESP ordinal=2\ntamper src=sm/1 dst=gw type=REPORT ordinal=3 bit=300"
    a = run_scenario(ScenarioConfig(jitter=1), script, seed=11)
    b = run_scenario(ScenarioConfig(jitter=1), script, seed=11)
    assert a.log.to_jsonl() == b.log.to_jsonl()
    c = run_scenario(ScenarioConfig(jitter=1), script, seed=12)
    assert c.log.to_jsonl() != a.log.to_jsonl()


@pytest.mark.parametrize("seed", range(20))
def test_honest_runs_raise_no_alarm(seed):
    res = run_scenario(SMALL, seed=seed)
    assert res.alarms == []
    assert res.total_accepted == 15
    assert res.accepted == res.sent


def test_honest_example_counts():
    res = run_scenario(ScenarioConfig())
    assert res.alarms == [] and res.total_accepted == 50


# -- script language ------------------------------------------------------------


def test_parse_script_all_actions():
    acts = parse_script(
        """
        # comment line
        drop src=sm/3 dst=gw type=REPORT ordinal=4 count=2
        replay src=sm/3 dst=gw type=REPORT ordinal=4 after=7
        tamper src=sm/3 dst=gw type=REPORT ordinal=2 bit=100  # trailing
        delay src=gw dst=cc type=TIME_CONFIRM ordinal=1 ticks=10
        rollback node=gw label=meter/3/session at=5390
        rollback node=cc label=keyring/000001 at=100 version=1
        skew at=100 seconds=86400
        """
    )
    assert [type(a) for a in acts] == [Drop, Replay, Tamper, Delay, RollbackStore, RollbackStore, SkewHostClock]
    assert acts[0].selector == Selector("sm/3", "gw", MsgType.REPORT, 4) and acts[0].count == 2
    assert acts[1].after == 7 and acts[2].bit == 100 and acts[3].ticks == 10
    assert (acts[4].steps, acts[4].version) == (1, None)
    assert (acts[5].steps, acts[5].version) == (None, 1)


@pytest.mark.parametrize(
    "text",
    [
        "explode src=a",
        "drop src",
        "drop type=NOPE",
        "tamper src=a",
        "drop colour=red",
        "rollback label=x",
        "skew at=abc seconds=1",
    ],
)
def test_parse_script_errors(text):
    with pytest.raises(ScriptError):
        parse_script(text)


def test_builders_append():
    sel = Selector("sm/1", "gw", MsgType.REPORT, 2)
    script = []
    inject_drop(script, sel)
    inject_replay(script, sel, after=3)
    inject_tamper(script, sel, bit=9)
    inject_delay(script, sel, ticks=4)
    inject_rollback(script, "meter/1/session", at=100, steps=2)
    assert [type(a) for a in script] == [Drop, Replay, Tamper, Delay, RollbackStore]
    assert script[-1].steps == 2


def test_vacuous_selector_raises():
    with pytest.raises(VacuousAction):
        run_scenario(SMALL, "drop src=sm/9 dst=gw type=REPORT ordinal=1")
    with pytest.raises(VacuousAction):
        run_scenario(SMALL, "drop src=sm/1 dst=gw type=REPORT ordinal=99")
    with pytest.raises(VacuousAction):
        run_scenario(SMALL, "rollback node=gw label=meter/1/session at=5 steps=1")


def test_non_strict_reports_unfired_actions():
    act = Drop(selector=Selector("sm/9", "gw", MsgType.REPORT, 1))
    run_scenario(SMALL, [act], strict=False)
    assert act.fired == 0


def test_flip_bit():
    assert flip_bit(b"\x00\x00", 0) == b"\x80\x00"
    assert flip_bit(b"\x00\x00", 15) == b"\x00\x01"
    assert flip_bit(b"\x00\x00", 16) == b"\x80\x00"
    assert flip_bit(b"", 3) == b""


# -- the example attacks --------------------------------------------------------


def test_replay_example_single_alarm():
    res = run_scenario(ScenarioConfig(), "replay src=sm/3 dst=gw type=REPORT ordinal=4 after=950")
    assert [(a.kind, a.meter_id) for a in res.alarms] == [(AlarmKind.REPLAY, 3)]


def test_rollback_example_alarms_at_period_six():
    cfg = ScenarioConfig()
    res = run_scenario(cfg, "rollback node=gw label=meter/3/session at=5390")
    first = res.alarms[0]
    assert (first.kind, first.meter_id) == (AlarmKind.ROLLBACK, 3)
    sched = cfg.schedule()
    assert sched.period_start(6) <= first.tick < sched.period_start(7)


def test_dropped_report_detected_at_next_report():
    cfg = ScenarioConfig(max_retries=0)
    res = run_scenario(cfg, "drop src=sm/2 dst=gw type=REPORT ordinal=3")
    assert [(a.kind, a.meter_id) for a in res.alarms][:1] == [(AlarmKind.ROLLBACK, 2)]


def test_dropped_report_all_retries_detected():
    res = run_scenario(ScenarioConfig(), "drop src=sm/2 dst=gw type=REPORT ordinal=3 count=5")
    assert AlarmKind.ROLLBACK in {a.kind for a in res.alarms}


def test_tampered_report_bit_alarm():
    res = run_scenario(ScenarioConfig(), "tamper src=sm/1 dst=gw type=REPORT ordinal=1 bit=300")
    assert [(a.kind, a.meter_id) for a in res.alarms] == [(AlarmKind.TAMPER, 1)]


def test_alarmed_meter_session_halts():
    res = run_scenario(ScenarioConfig(), "rollback node=gw label=meter/3/session at=5390")
    assert res.log.of_kind("rejected_halted")
    assert all(c <= 5 for c, _ in res.accepted[3])


# -- exhaustive soundness on a small deployment -------------------------------------


def test_attack_enumeration_covers_every_family():
    honest = run_scenario(ScenarioConfig(meters=2, periods=2))
    fams = {f for f, _ in attack_space.single_action_scripts(honest, honest.config)}
    assert fams == {"drop", "replay", "tamper", "rollback"}
    assert attack_space.tamper_bits(76) == sorted(set(attack_space.tamper_bits(76)))
    assert len(attack_space.tamper_bits(76)) == 20


def test_exhaustive_soundness_small():
    runs, skipped, outcomes, failures = attack_space.check_all(ScenarioConfig(meters=2, periods=3))
    assert failures == []
    assert runs > 900
    for fam in ("drop", "replay", "tamper", "rollback"):
        assert outcomes[fam, "alarm"] > 0, fam
