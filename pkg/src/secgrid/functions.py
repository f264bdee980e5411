"""Grid functions evaluated inside the gateway enclave.

Readings are secret, so aggregation, RTP pricing, billing and forecasting
are written against the primitives in :mod:`secgrid.oblivious`. ToU and CPP
branch freely because their only condition is public time.

Units: readings in watt-hours, prices in milli-currency, forecasts in
milli-watt-hours. Everything is integer (or exact rational for the
day-ahead prediction).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from operator import itemgetter
from typing import Mapping, Optional, Sequence

import numpy as np

from .oblivious import (
    M64,
    as_words,
    emit,
    o_add,
    o_greater,
    o_greater_vec,
    o_move,
    o_move_vec,
    o_mul,
    o_sum,
    oread,
)

MINUTES_PER_DAY = 24 * 60
HOURS = 24
FIXED_POINT = 1000  # milli scale for forecast coefficients and loads


class FunctionError(Exception):
    pass


class ArithmeticOverflow(FunctionError):
    """A u64 accumulator wrapped. Raised once, after the oblivious loop."""


# --------------------------------------------------------------------------
# aggregation


@dataclass
class UsageWindow:
    """Accepted readings for ``meters`` over periods [start, start+span).

    ``arrivals`` holds (meter_id, period, reading) in report arrival order.
    Meter ids and periods are public; readings are not.
    """

    area_id: str
    start: int
    span: int
    meters: tuple
    arrivals: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self._slots = {(m, p) for m, p, _ in self.arrivals}

    def add(self, meter_id: int, period: int, reading: int) -> None:
        if not self.start <= period < self.start + self.span:
            raise ValueError("period outside window")
        self.arrivals.append((meter_id, period, reading))
        self._slots.add((meter_id, period))

    @property
    def complete(self) -> bool:
        return len(self._slots) == len(self.arrivals) == len(self.meters) * self.span


def aggregate_window(w: UsageWindow, *, require_complete: bool = True) -> int:
    if require_complete and not w.complete:
        raise FunctionError("window incomplete")
    total, carry = o_sum(as_words(map(itemgetter(2), w.arrivals)))
    if carry:
        raise ArithmeticOverflow("aggregate exceeds u64")
    return total


# --------------------------------------------------------------------------
# time-of-use and critical peak


@dataclass(frozen=True)
class TouParams:
    p: int
    delta_p: int
    peak_windows: tuple = ()

    def __post_init__(self) -> None:
        if self.p < 0 or self.delta_p < 0:
            raise ValueError("prices must be non-negative")
        spans = sorted(tuple(w) for w in self.peak_windows)
        for start, end in spans:
            if not 0 <= start < end <= MINUTES_PER_DAY:
                raise ValueError(f"bad peak window [{start}, {end})")
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ValueError("peak windows overlap")
        object.__setattr__(self, "peak_windows", tuple(spans))


def price_tou(t: int, params: TouParams) -> int:
    t %= MINUTES_PER_DAY
    for start, end in params.peak_windows:
        if start <= t < end:
            return params.p + params.delta_p
    return params.p


@dataclass(frozen=True)
class CppCalendar:
    events: Mapping[int, TouParams] = field(default_factory=dict)


def price_cpp(day: int, t: int, base: TouParams, cal: CppCalendar) -> int:
    return price_tou(t, cal.events.get(day, base))


# --------------------------------------------------------------------------
# real-time pricing


def price_rtp(m_h: int, a_h: int, b_h: int, m0: int) -> int:
    """a_h below the threshold m0, b_h at or above it. No branch on m_h."""
    below = o_greater(m0, m_h)
    return o_move(below, a_h, b_h)


def price_rtp_batch(usage: Sequence[int], a_h: int, b_h: int, m0: int) -> np.ndarray:
    """price_rtp for many meters in one branch-free pass."""
    words = as_words(usage)
    below = o_greater_vec(np.full(words.size, m0, dtype=np.uint64), words)
    return o_move_vec(below, a_h, b_h)


DEFAULT_K = (Fraction(1, 2), Fraction(3, 10), Fraction(1, 5))


@dataclass
class RtpParams:
    m0: int
    a: dict = field(default_factory=dict)  # day -> 24 hourly prices
    b: dict = field(default_factory=dict)
    k: tuple = DEFAULT_K

    def __post_init__(self) -> None:
        if self.m0 < 0:
            raise ValueError("m0 must be non-negative")
        self.k = tuple(Fraction(x) for x in self.k)
        if len(self.k) != 3:
            raise ValueError("need exactly three prediction coefficients")

    def hourly(self, day: int, hour: int) -> tuple[int, int]:
        return self.a[day][hour], self.b[day][hour]


def rtp_predict_day(
    a_hist: Mapping[int, Sequence[int]],
    b_hist: Mapping[int, Sequence[int]],
    day: int,
    k: Sequence = DEFAULT_K,
) -> tuple[list[Fraction], list[Fraction]]:
    """Day-ahead parameters from days t-1, t-2 and t-7, exact."""
    k1, k2, k3 = (Fraction(x) for x in k)
    lags = (day - 1, day - 2, day - 7)
    for hist in (a_hist, b_hist):
        for d in lags:
            if d not in hist:
                raise FunctionError(f"missing history for day {d}")
            if len(hist[d]) != HOURS:
                raise FunctionError(f"day {d} needs {HOURS} hourly values")

    def predict(hist: Mapping[int, Sequence[int]]) -> list[Fraction]:
        d1, d2, d7 = (hist[d] for d in lags)
        return [k1 * d1[h] + k2 * d2[h] + k3 * d7[h] for h in range(HOURS)]

    return predict(a_hist), predict(b_hist)


# --------------------------------------------------------------------------
# billing


def compute_bill(readings: Sequence[int], prices: Sequence[int]) -> int:
    if len(readings) != len(prices):
        raise ValueError("readings and prices differ in length")
    total = 0
    overflow = 0
    for h in range(len(readings)):
        prod, of = o_mul(oread(readings, h), oread(prices, h))
        total, c = o_add(total, prod)
        overflow |= of | c
    if overflow:
        raise ArithmeticOverflow("bill exceeds u64")
    return total


# --------------------------------------------------------------------------
# stochastic time series forecasting


def _to_milli(x) -> int:
    scaled = Fraction(x) * FIXED_POINT
    if scaled.denominator != 1:
        raise ValueError(f"coefficient {x} is not a multiple of 1/{FIXED_POINT}")
    return int(scaled)


@dataclass(frozen=True)
class StsModel:
    phi: tuple = (1,)
    sigma: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.phi:
            raise ValueError("order must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "phi", tuple(Fraction(x) for x in self.phi))

    @property
    def order(self) -> int:
        return len(self.phi)

    def phi_milli(self) -> list[int]:
        return [_to_milli(x) for x in self.phi]


def forecast_sts(history: Sequence[int], model: StsModel, step: int = 0) -> int:
    """Next load in milli-Wh from ``history`` (oldest first, milli-Wh).

    With sigma > 0 (milli-Wh) the noise term is drawn from a Gaussian seeded by
    (model.seed, step), so it never depends on the history values.
    """
    k = model.order
    n = len(history)
    if n < k:
        raise FunctionError(f"need {k} history values, have {n}")
    coeffs = model.phi_milli()
    acc = 0
    for j in range(k):
        emit("o_mul", 64)
        emit("o_add", 64)
        acc += coeffs[j] * oread(history, n - 1 - j)
    emit("o_div", 64)
    load = acc // FIXED_POINT
    if model.sigma > 0:
        rng = random.Random(f"{model.seed}/{step}")
        emit("o_add", 64)
        load += int(round(rng.gauss(0.0, model.sigma)))
    return load


__all__ = [
    "ArithmeticOverflow",
    "CppCalendar",
    "DEFAULT_K",
    "FunctionError",
    "M64",
    "RtpParams",
    "StsModel",
    "TouParams",
    "UsageWindow",
    "aggregate_window",
    "compute_bill",
    "forecast_sts",
    "price_cpp",
    "price_rtp",
    "price_rtp_batch",
    "price_tou",
    "rtp_predict_day",
]
