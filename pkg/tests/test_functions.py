import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from secgrid.functions import (
    ArithmeticOverflow,
    CppCalendar,
    FunctionError,
    RtpParams,
    StsModel,
    TouParams,
    UsageWindow,
    aggregate_window,
    compute_bill,
    forecast_sts,
    price_cpp,
    price_rtp,
    price_rtp_batch,
    price_tou,
    rtp_predict_day,
)
from secgrid.oblivious import M64, record_trace


def window(rows, order=None):
    """rows[i][p] is meter i's reading in period p."""
    arrivals = [(i, p, r) for p in range(len(rows[0])) for i, r in enumerate(col[p] for col in rows)]
    if order is not None:
        arrivals = [arrivals[j] for j in order]
    return UsageWindow("a", 0, len(rows[0]), tuple(range(len(rows))), arrivals)


# -- aggregation --------------------------------------------------------------------


def test_aggregate_zero():
    assert aggregate_window(window([[0, 0], [0, 0]])) == 0


def test_aggregate_three_by_two():
    assert aggregate_window(window([[1, 2], [3, 4], [5, 6]])) == 21


def test_aggregate_single():
    assert aggregate_window(window([[777]])) == 777


def test_aggregate_incomplete_window():
    w = UsageWindow("a", 0, 2, (1, 2), [(1, 0, 5)])
    with pytest.raises(FunctionError):
        aggregate_window(w)
    assert aggregate_window(w, require_complete=False) == 5


def test_aggregate_duplicate_slot_is_not_complete():
    w = UsageWindow("a", 0, 1, (1, 2), [(1, 0, 5), (1, 0, 5)])
    assert not w.complete


def test_aggregate_overflow():
    with pytest.raises(ArithmeticOverflow):
        aggregate_window(window([[M64], [1]]))


def test_window_rejects_out_of_range_period():
    w = UsageWindow("a", 10, 2, (1,))
    with pytest.raises(ValueError):
        w.add(1, 12, 5)


@given(st.lists(st.lists(st.integers(0, 2**40), min_size=3, max_size=3), min_size=1, max_size=6), st.randoms())
def test_aggregate_matches_oracle_any_order(rows, rnd):
    order = list(range(len(rows) * 3))
    rnd.shuffle(order)
    assert aggregate_window(window(rows, order)) == oracles.aggregate(rows)


# -- ToU / CPP ----------------------------------------------------------------------

EVENING = TouParams(120, 80, ((1020, 1260),))


def test_tou_peak_and_off_peak():
    assert price_tou(1100, EVENING) == 200
    assert price_tou(600, EVENING) == 120
    assert price_tou(1020, EVENING) == 200
    assert price_tou(1260, EVENING) == 120
    assert price_tou(1019, EVENING) == 120


def test_tou_validation():
    with pytest.raises(ValueError):
        TouParams(1, -1)
    with pytest.raises(ValueError):
        TouParams(1, 1, ((10, 20), (15, 30)))
    with pytest.raises(ValueError):
        TouParams(1, 1, ((20, 10),))


def test_cpp():
    event = TouParams(150, 300, ((960, 1320),))
    cal = CppCalendar({19676: event})
    assert price_cpp(19675, 1000, EVENING, cal) == price_tou(1000, EVENING)
    assert price_cpp(19676, 1000, EVENING, cal) == 450
    for t in range(0, 1440, 7):
        assert price_cpp(123, t, EVENING, CppCalendar()) == price_tou(t, EVENING)


def test_tou_cpp_random_against_oracle():
    rng = random.Random(8)
    for _ in range(10_000):
        windows = oracles.random_windows(rng)
        p, dp = rng.randrange(1000), rng.randrange(1000)
        t = rng.randrange(3 * 1440)
        assert price_tou(t, TouParams(p, dp, windows)) == oracles.tou(t, p, dp, windows)
        ev_windows = oracles.random_windows(rng)
        events = {d: (rng.randrange(1000), rng.randrange(1000), ev_windows) for d in rng.sample(range(30), 3)}
        cal = CppCalendar({d: TouParams(*v) for d, v in events.items()})
        day = rng.randrange(30)
        assert price_cpp(day, t, TouParams(p, dp, windows), cal) == oracles.cpp(day, t, (p, dp, windows), events)


# -- RTP ----------------------------------------------------------------------------


def test_rtp_examples():
    assert price_rtp(0, 100, 180, 1000) == 100
    assert price_rtp(1000, 100, 180, 1000) == 180
    assert price_rtp(999, 100, 180, 1000) == 100


def test_rtp_exhaustive_around_threshold():
    m0 = 1000
    for m in range(0, 2 * m0 + 1):
        assert price_rtp(m, 100, 180, m0) == oracles.rtp(m, 100, 180, m0)


def test_rtp_batch_matches_scalar():
    rng = random.Random(2)
    usage = [rng.randrange(0, 2**64) for _ in range(500)] + [0, 999, 1000, 1001, M64]
    out = price_rtp_batch(usage, 100, 180, 1000)
    assert out.tolist() == [price_rtp(m, 100, 180, 1000) for m in usage]
    assert price_rtp_batch(np.array([], dtype=np.uint64), 1, 2, 3).size == 0


def test_rtp_predict_examples():
    hist = {d: [d * 10 + h for h in range(24)] for d in range(1, 9)}
    a, b = rtp_predict_day(hist, hist, 8, (1, 0, 0))
    assert a == hist[7] and b == hist[7]
    const = {d: [250] * 24 for d in range(1, 9)}
    a, _ = rtp_predict_day(const, const, 8, ("1/2", "3/10", "1/5"))
    assert a == [250] * 24


def test_rtp_predict_missing_day():
    hist = {d: [1] * 24 for d in (6, 7)}
    with pytest.raises(FunctionError):
        rtp_predict_day(hist, hist, 8)
    short = {d: [1] * 23 for d in (1, 6, 7)}
    with pytest.raises(FunctionError):
        rtp_predict_day(short, short, 8)


def test_rtp_predict_random_against_oracle():
    rng = random.Random(4)
    for _ in range(300):
        day = rng.randrange(7, 400)
        a_hist = {d: [rng.randrange(0, 10_000) for _ in range(24)] for d in (day - 1, day - 2, day - 7)}
        b_hist = {d: [rng.randrange(0, 10_000) for _ in range(24)] for d in (day - 1, day - 2, day - 7)}
        k = tuple(Fraction(rng.randrange(0, 11), 10) for _ in range(3))
        a, b = rtp_predict_day(a_hist, b_hist, day, k)
        assert a == oracles.predict(a_hist, day, k)
        assert b == oracles.predict(b_hist, day, k)


@given(st.integers(-50, 50), st.lists(st.integers(0, 5000), min_size=24 * 3, max_size=24 * 3))
def test_rtp_predict_is_linear(alpha, values):
    hist = {d: values[24 * i:24 * (i + 1)] for i, d in enumerate((9, 8, 3))}
    scaled = {d: [alpha * v for v in vs] for d, vs in hist.items()}
    a, _ = rtp_predict_day(hist, hist, 10)
    a2, _ = rtp_predict_day(scaled, scaled, 10)
    assert a2 == [alpha * x for x in a]


def test_rtp_params_validation():
    with pytest.raises(ValueError):
        RtpParams(-1)
    with pytest.raises(ValueError):
        RtpParams(1, k=(1, 2))


# -- forecasting ------------------------------------------------------------------------


def test_forecast_persistence():
    assert forecast_sts([5, 6, 7000], StsModel((1,))) == 7000


def test_forecast_half_half():
    assert forecast_sts([100, 200], StsModel(("1/2", "1/2"))) == 150


def test_forecast_constant_fixed_point():
    assert forecast_sts([4321] * 3, StsModel(("1/2", "3/10", "1/5"))) == 4321


def test_forecast_needs_history():
    with pytest.raises(FunctionError):
        forecast_sts([1], StsModel((1, 1)))


def test_forecast_rejects_off_grid_coefficients():
    with pytest.raises(ValueError):
        forecast_sts([1], StsModel(("1/3",)))


def test_forecast_random_against_oracle():
    rng = random.Random(6)
    for _ in range(20_000):
        k = rng.randrange(1, 6)
        phi = tuple(oracles.random_milli(rng) for _ in range(k))
        hist = [rng.randrange(0, 10**9) for _ in range(rng.randrange(k, k + 4))]
        assert forecast_sts(hist, StsModel(phi)) == oracles.forecast(hist, phi)


def test_forecast_noise_is_seeded_and_value_independent():
    m = StsModel((1,), sigma=50.0, seed=3)
    a = forecast_sts([1000], m, step=4) - 1000
    b = forecast_sts([999_999], m, step=4) - 999_999
    assert a == b
    assert forecast_sts([1000], m, step=4) == forecast_sts([1000], m, step=4)
    assert forecast_sts([1000], StsModel((1,), sigma=0.0, seed=3), step=4) == 1000


# -- billing ----------------------------------------------------------------------------


def test_bill_examples():
    assert compute_bill([0] * 24, [100] * 24) == 0
    assert compute_bill([1000], [5]) == 5000


def test_bill_random_against_oracle():
    rng = random.Random(9)
    for _ in range(2000):
        r = [rng.randrange(0, 10**6) for _ in range(24)]
        p = [rng.randrange(0, 10**4) for _ in range(24)]
        assert compute_bill(r, p) == oracles.bill(r, p)


def test_bill_overflow_and_length():
    with pytest.raises(ArithmeticOverflow):
        compute_bill([2**40], [2**30])
    with pytest.raises(ArithmeticOverflow):
        compute_bill([2**63, 2**63], [1, 1])
    with pytest.raises(ValueError):
        compute_bill([1], [1, 2])


# -- obliviousness -----------------------------------------------------------------------


def _traces(fn, make_args, n=100, seed=0):
    rng = random.Random(seed)
    return {record_trace(fn, *make_args(rng)).to_bytes() for _ in range(n)}


def test_price_rtp_trace_invariant():
    assert len(_traces(price_rtp, lambda r: (r.getrandbits(64), 100, 180, 1000))) == 1


def test_aggregate_trace_invariant():
    def args(r):
        return (window([[r.getrandbits(32) for _ in range(4)] for _ in range(5)]),)

    assert len(_traces(aggregate_window, args)) == 1


def test_forecast_trace_invariant():
    m = StsModel(("1/2", "3/10", "1/5"))
    assert len(_traces(forecast_sts, lambda r: ([r.randrange(10**12) for _ in range(3)], m))) == 1


def test_bill_trace_invariant():
    prices = list(range(100, 124))
    assert len(_traces(compute_bill, lambda r: ([r.randrange(10**6) for _ in range(24)], prices))) == 1


def test_aggregate_order_changes_trace_only_through_public_order():
    rows = [[1, 2], [3, 4], [5, 6]]
    t1 = record_trace(aggregate_window, window(rows))
    t2 = record_trace(aggregate_window, window(rows, [5, 4, 3, 2, 1, 0]))
    assert t1 == t2
    assert aggregate_window(window(rows, [5, 4, 3, 2, 1, 0])) == 21
