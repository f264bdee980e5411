import pytest

from secgrid.functions import TouParams
from secgrid.scenario import ConfigError, ScenarioConfig, run_scenario


def ini(body):
    return "[scenario]\n" + body


def test_empty_section_gives_defaults():
    assert ScenarioConfig.from_ini(ini("")) == ScenarioConfig()


def test_typed_values():
    cfg = ScenarioConfig.from_ini(ini(
        "meters = 7\nperiods = 3\nsentinel = yes\nsts_sigma = 2.5\nrestart_crash_at = 4000\n"
        "restart_boot_at = 4950\npeak_windows = 1020-1260, 420-540\n"
    ))
    assert (cfg.meters, cfg.periods, cfg.sentinel, cfg.sts_sigma) == (7, 3, True, 2.5)
    assert (cfg.restart_crash_at, cfg.restart_boot_at) == (4000, 4950)
    assert cfg.grid().tou.peak_windows == ((420, 540), (1020, 1260))


def test_inline_comments():
    assert ScenarioConfig.from_ini(ini("meters = 4  # four houses\n")).meters == 4


def test_cpp_days_parsed():
    cfg = ScenarioConfig.from_ini(ini("cpp_days = 19676:150:120:960-1320; 19677:100:50:600-660/700-720\n"))
    cal = cfg.grid().cpp
    assert cal.events[19676] == TouParams(150, 120, ((960, 1320),))
    assert cal.events[19677].peak_windows == ((600, 660), (700, 720))


def test_hourly_rtp_parameters():
    cfg = ScenarioConfig.from_ini(ini("rtp_a = " + ",".join(str(i) for i in range(24)) + "\n"))
    assert cfg.grid().rtp_default_a == tuple(range(24))
    assert cfg.grid().rtp_default_b == (180,) * 24


def test_reregister_entries():
    cfg = ScenarioConfig.from_ini(ini("reregister = 2@3000, 1@4000\n"))
    assert cfg.reregistrations() == [(2, 3000), (1, 4000)]


@pytest.mark.parametrize(
    "body",
    [
        "meters = 0\n",
        "periods = 0\n",
        "meters = five\n",
        "colour = blue\n",
        "window_close = 900\n",
        "retransmit = 200\n",
        "reading_max = 0\n",
        "latency = 0\n",
        "restart_crash_at = 10\n",
        "restart_crash_at = 100\nrestart_boot_at = 50\n",
        "rtp_a = 1,2,3\n",
        "peak_windows = 600-500\n",
        "cpp_days = 1:1:1:10-20; 1:2:2:10-20\n",
        "reregister = 9@100\n",
        "sentinel = maybe\n",
    ],
)
def test_invalid_values_rejected(body):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_ini(ini(body))


def test_missing_section_and_syntax():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_ini("meters = 3\n")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_ini("[other]\nmeters = 3\n")


def test_reading_is_deterministic_and_in_range():
    cfg = ScenarioConfig(reading_min=10, reading_max=20)
    vals = [cfg.reading(m, p) for m in range(1, 6) for p in range(1, 30)]
    assert all(10 <= v < 20 for v in vals)
    assert vals == [cfg.reading(m, p) for m in range(1, 6) for p in range(1, 30)]
    assert ScenarioConfig(seed=2).reading(1, 1) != ScenarioConfig(seed=3).reading(1, 1)


def test_seed_override_in_run():
    a = run_scenario(ScenarioConfig(meters=2, periods=2), seed=5)
    assert a.config.seed == 5


def test_reregister_in_config_raises_double_registration():
    res = run_scenario(ScenarioConfig(meters=3, periods=4, reregister="2@2000"))
    kinds = res.alarm_counts()
    assert kinds["DoubleReg"] == 1
    # the registered session keeps working
    assert [c for c, _ in res.accepted[2]] == [1, 2, 3, 4]
