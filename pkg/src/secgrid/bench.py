"""Benchmark harness: enclave-side grid functions against a Paillier baseline.

Every point is timed with ``time.perf_counter_ns`` (monotonic) after a few
warm-up runs, and reported as median and 95th percentile in milliseconds.
Inputs are generated from a seed and encrypted before timing starts, so a
Paillier point measures only the homomorphic work plus the final decrypt.

Pricing rows are per request: the batch time divided by the batch size.
An empty batch (users = 0) reports the raw call overhead.
"""
from __future__ import annotations

import csv
import random
import statistics
import time
from dataclasses import astuple, dataclass
from typing import Callable, Iterable, Optional, Sequence, TextIO

import numpy as np

from . import crypto, paillier
from .enclave import create_enclave, seal, unseal
from .functions import StsModel, UsageWindow, aggregate_window, forecast_sts, price_rtp_batch
from .wire import REPORT_AAD, Report, ReportPlain

CSV_FIELDS = ("function", "users", "backend", "median_ms", "p95_ms", "iterations")
FUNCTIONS = ("agg", "pricing", "forecast")
BACKENDS = ("enclave", "paillier")
DEFAULT_USERS = (0, 500, 1000, 2000)
WARMUP = 5
MIN_ITERATIONS = 30

READING_MAX = 2000
RTP = dict(a_h=100, b_h=180, m0=1000)
FORECAST_PHI = ("1/2", "3/10", "1/5")
PAST_AGGREGATES = (1_180_000, 1_210_000)  # Wh, the two windows before the current one


@dataclass(frozen=True)
class BenchRow:
    function: str
    users: int
    backend: str
    median_ms: float
    p95_ms: float
    iterations: int


@dataclass(frozen=True)
class Point:
    row: BenchRow
    checksum: int  # functional output of the last timed call


def measure(fn: Callable[[], object], iterations: int = MIN_ITERATIONS, warmup: int = WARMUP) -> tuple[list[float], object]:
    """Run ``fn`` warmup + iterations times; return per-call ms and the last result."""
    if iterations < 1:
        raise ValueError("need at least one iteration")
    out = None
    for _ in range(warmup):
        out = fn()
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        out = fn()
        samples.append((time.perf_counter_ns() - t0) / 1e6)
    return samples, out


def summarize(function: str, users: int, backend: str, samples: Sequence[float], scale: float = 1.0) -> BenchRow:
    ordered = sorted(s * scale for s in samples)
    p95 = ordered[min(len(ordered) - 1, int(np.ceil(0.95 * len(ordered))) - 1)]
    return BenchRow(function, users, backend, statistics.median(ordered), p95, len(ordered))


def readings(n: int, seed: int = 0) -> list[int]:
    rng = random.Random(f"bench/{seed}")
    return [rng.randrange(READING_MAX) for _ in range(n)]


class PaillierContext:
    """One keypair plus a cache of encrypted readings, grown on demand."""

    def __init__(self, bits: int = paillier.DEFAULT_BITS, seed: int = 0) -> None:
        self.keys = paillier.keygen(bits)
        self.seed = seed
        self._plain: list[int] = []
        self._cts: list = []
        self.past = [paillier.encrypt(self.keys.public, a) for a in PAST_AGGREGATES]

    def ciphertexts(self, n: int) -> list:
        if n > len(self._cts):
            self._plain = readings(n, self.seed)
            pk = self.keys.public
            self._cts.extend(paillier.encrypt(pk, m) for m in self._plain[len(self._cts):])
        return self._cts[:n]


def _window(values: Sequence[int]) -> UsageWindow:
    return UsageWindow("bench", 0, 1, tuple(range(len(values))), [(i, 0, v) for i, v in enumerate(values)])


def _forecast_model() -> StsModel:
    return StsModel(phi=FORECAST_PHI)


def _agg(n: int, backend: str, ctx: Optional[PaillierContext], seed: int) -> Callable[[], int]:
    if backend == "enclave":
        w = _window(readings(n, seed))
        return lambda: aggregate_window(w)
    cts = ctx.ciphertexts(n)
    pk, sk = ctx.keys.public, ctx.keys.private
    return lambda: paillier.decrypt(sk, paillier.sum_ct(cts, pk))


def _pricing(n: int, backend: str, ctx: Optional[PaillierContext], seed: int) -> Callable[[], int]:
    if backend == "enclave":
        usage = np.asarray(readings(n, seed), dtype=np.uint64)
        return lambda: int(price_rtp_batch(usage, **RTP).sum())
    # Under encryption the threshold cannot be tested, so each request is
    # one multiply by the public base rate.
    cts = ctx.ciphertexts(n)
    a_h = RTP["a_h"]
    return lambda: len([paillier.mul_scalar(c, a_h) for c in cts])


def _forecast(n: int, backend: str, ctx: Optional[PaillierContext], seed: int) -> Callable[[], int]:
    model = _forecast_model()
    if backend == "enclave":
        w = _window(readings(n, seed))
        past = [a * 1000 for a in PAST_AGGREGATES]

        def run() -> int:
            # history oldest first, in milli-Wh
            return forecast_sts([past[0], past[1], aggregate_window(w) * 1000], model)

        return run
    cts = ctx.ciphertexts(n)
    pk, sk = ctx.keys.public, ctx.keys.private
    coeffs = model.phi_milli()

    def run_he() -> int:
        current = paillier.sum_ct(cts, pk)
        history = [ctx.past[0], ctx.past[1], current]  # oldest first
        terms = [paillier.mul_scalar(history[-1 - j], coeffs[j]) for j in range(len(coeffs))]
        # coefficients are milli-scaled and inputs are Wh, so this is milli-Wh
        return paillier.decrypt(sk, paillier.sum_ct(terms, pk))

    return run_he


_BUILDERS = {"agg": _agg, "pricing": _pricing, "forecast": _forecast}


def bench_point(
    function: str,
    users: int,
    backend: str,
    iterations: int = MIN_ITERATIONS,
    ctx: Optional[PaillierContext] = None,
    seed: int = 0,
) -> Point:
    if function not in _BUILDERS:
        raise ValueError(f"unknown function {function!r}")
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if users < 0:
        raise ValueError("users must be non-negative")
    if backend == "paillier" and ctx is None:
        ctx = PaillierContext(seed=seed)
    fn = _BUILDERS[function](users, backend, ctx, seed)
    samples, out = measure(fn, iterations)
    scale = 1.0 / users if function == "pricing" and users else 1.0
    return Point(summarize(function, users, backend, samples, scale), int(out))


def untimed(function: str, users: int, backend: str, ctx: Optional[PaillierContext] = None, seed: int = 0) -> int:
    """The same computation as :func:`bench_point`, called once with no timer."""
    if backend == "paillier" and ctx is None:
        ctx = PaillierContext(seed=seed)
    return int(_BUILDERS[function](users, backend, ctx, seed)())


def run_suite(
    functions: Iterable[str] = FUNCTIONS,
    users: Iterable[int] = DEFAULT_USERS,
    backends: Iterable[str] = BACKENDS,
    iterations: int = MIN_ITERATIONS,
    micro: bool = True,
    seed: int = 0,
    progress: Optional[Callable[[BenchRow], None]] = None,
) -> list[BenchRow]:
    backends = tuple(backends)
    ctx = PaillierContext(seed=seed) if "paillier" in backends else None
    rows = []
    for fn_name in functions:
        for n in users:
            for b in backends:
                row = bench_point(fn_name, n, b, iterations, ctx, seed).row
                rows.append(row)
                if progress:
                    progress(row)
    if micro:
        for row in micro_bench(iterations, ctx):
            rows.append(row)
            if progress:
                progress(row)
    return rows


def micro_bench(iterations: int = MIN_ITERATIONS, ctx: Optional[PaillierContext] = None) -> list[BenchRow]:
    """Single-operation costs: AE on 0.1 KB, signatures, sealing, and Paillier ops."""
    rng = crypto.Drbg(b"bench/micro")
    payload = rng.bytes(100)
    key = crypto.SymKey.generate(rng)
    env = crypto.ae_encrypt(key, payload)
    kp = crypto.SignKeypair.generate(rng)
    pk_bytes = crypto.encode_point(kp.secret.public_key())
    sig = crypto.sign(kp.secret, payload)
    enc = create_enclave("bench", rng.bytes(32), rng=rng)
    sealed = seal(enc, "bench", payload)
    ops: list[tuple[str, str, Callable[[], object]]] = [
        ("ae_encrypt_100B", "enclave", lambda: crypto.ae_encrypt(key, payload)),
        ("ae_decrypt_100B", "enclave", lambda: crypto.ae_decrypt(key, env)),
        ("sign", "enclave", lambda: crypto.sign(kp.secret, payload)),
        ("verify", "enclave", lambda: crypto.verify(pk_bytes, payload, sig)),
        ("seal_100B", "enclave", lambda: seal(enc, "bench", payload)),
        ("unseal_100B", "enclave", lambda: unseal(enc, sealed)),
    ]
    if ctx is not None:
        pk, sk = ctx.keys.public, ctx.keys.private
        c1, c2 = ctx.ciphertexts(2)
        ops += [
            ("he_encrypt", "paillier", lambda: paillier.encrypt(pk, 1234)),
            ("he_decrypt", "paillier", lambda: paillier.decrypt(sk, c1)),
            ("he_add", "paillier", lambda: paillier.add_ct(c1, c2)),
            ("he_mul_scalar", "paillier", lambda: paillier.mul_scalar(c1, RTP["a_h"])),
        ]
    return [summarize(name, 0, backend, measure(fn, iterations)[0]) for name, backend, fn in ops]


# --------------------------------------------------------------------------
# report intake


def transmit_workload(n: int, seed: int = 0) -> tuple[dict[int, crypto.SymKey], list[bytes]]:
    """n meters with their own session keys, and one encoded report each."""
    rng = crypto.Drbg(f"bench/transmit/{seed}".encode())
    sessions = {}
    bodies = []
    for meter_id in range(1, n + 1):
        k = crypto.SymKey.generate(rng)
        sessions[meter_id] = crypto.SymKey(k.material, rng.bytes(4))
        plain = ReportPlain(meter_id, meter_id % READING_MAX, rng.bytes(16), 1)
        bodies.append(Report(meter_id, crypto.ae_encrypt(k, plain.encode(), REPORT_AAD)).encode())
    return sessions, bodies


def intake(sessions: dict[int, crypto.SymKey], bodies: Sequence[bytes]) -> int:
    """Decode, look up the session and decrypt every report; returns the reading sum."""
    total = 0
    for body in bodies:
        r = Report.decode(body)
        pt = crypto.ae_decrypt(sessions[r.meter_id_clear], r.envelope)
        total += ReportPlain.decode(pt).reading
    return total


def transmit_bench(n: int, iterations: int = MIN_ITERATIONS, seed: int = 0) -> BenchRow:
    sessions, bodies = transmit_workload(n, seed)
    samples, _ = measure(lambda: intake(sessions, bodies), iterations)
    return summarize("transmit", n, "enclave", samples)


# --------------------------------------------------------------------------
# output


def write_csv(rows: Iterable[BenchRow], out: TextIO) -> None:
    w = csv.writer(out, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        f, n, b, med, p95, it = astuple(r)
        w.writerow((f, n, b, f"{med:.6f}", f"{p95:.6f}", it))


def read_csv(text: str) -> list[BenchRow]:
    rows = []
    for rec in csv.DictReader(text.splitlines()):
        rows.append(BenchRow(
            rec["function"], int(rec["users"]), rec["backend"],
            float(rec["median_ms"]), float(rec["p95_ms"]), int(rec["iterations"]),
        ))
    return rows
