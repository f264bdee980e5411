"""Command-line entry point: ``secgrid run | bench | transmit-bench | vectors``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench
from .adversary import ScriptError, VacuousAction
from .scenario import ConfigError, ScenarioConfig, run_scenario

EXIT_USAGE = 2
EXIT_BAD_INPUT = 1


def _fail(code: int, msg: str) -> int:
    print(f"secgrid: error: {msg}", file=sys.stderr)
    return code


def _users(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad user counts {text!r}") from None
    if not vals or min(vals) < 0:
        raise argparse.ArgumentTypeError("user counts must be non-negative integers")
    return vals


def _iterations(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("iterations must be >= 1")
    return n


def cmd_run(args: argparse.Namespace) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        return _fail(EXIT_USAGE, f"config file not found: {cfg_path}")
    script = ""
    if args.script:
        sp = Path(args.script)
        if not sp.is_file():
            return _fail(EXIT_USAGE, f"script file not found: {sp}")
        script = sp.read_text()
    try:
        cfg = ScenarioConfig.from_ini(cfg_path.read_text())
        result = run_scenario(cfg, script, seed=args.seed, strict=not args.lenient)
    except (ConfigError, ScriptError) as e:
        return _fail(EXIT_BAD_INPUT, str(e))
    except VacuousAction as e:
        return _fail(EXIT_BAD_INPUT, f"script action never matched: {e}")
    log_text = result.log.to_jsonl()
    if args.log == "-":
        sys.stdout.write(log_text)
    else:
        Path(args.log).write_text(log_text)
    out = sys.stderr if args.log == "-" else sys.stdout
    out.write(result.summary())
    return 0


def _open_out(path: Optional[str]):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_bench(args: argparse.Namespace) -> int:
    functions = bench.FUNCTIONS if args.function == "all" else (args.function,)
    backends = bench.BACKENDS if args.backend == "both" else (args.backend,)
    micro = args.micro or args.function == "all"

    def progress(row: bench.BenchRow) -> None:
        if args.out:
            print(f"{row.function:>16} n={row.users:<5} {row.backend:<8} median {row.median_ms:.6f} ms", file=sys.stderr)

    rows = bench.run_suite(functions, args.users, backends, args.iterations, micro, args.seed, progress)
    out = _open_out(args.out)
    try:
        bench.write_csv(rows, out)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_transmit(args: argparse.Namespace) -> int:
    rows = [bench.transmit_bench(n, args.iterations, args.seed) for n in args.users]
    out = _open_out(args.out)
    try:
        bench.write_csv(rows, out)
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_vectors(args: argparse.Namespace) -> int:
    from .vectors import dump

    data = dump()
    sys.stdout.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return 0 if all(c["ok"] for c in data["gcm"]) else EXIT_BAD_INPUT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="secgrid", description="Smart-grid enclave protocol simulator and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write its event log")
    r.add_argument("--config", required=True, help="scenario INI file")
    r.add_argument("--script", help="adversary script file")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--log", default="events.jsonl", help="event log path, '-' for stdout (default: events.jsonl)")
    r.add_argument("--lenient", action="store_true", help="allow script actions that never match")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="time grid functions on the enclave and Paillier backends")
    b.add_argument("--function", choices=(*bench.FUNCTIONS, "all"), default="all")
    b.add_argument("--users", type=_users, default=list(bench.DEFAULT_USERS), help="comma-separated user counts")
    b.add_argument("--backend", choices=(*bench.BACKENDS, "both"), default="both")
    b.add_argument("--iterations", type=_iterations, default=bench.MIN_ITERATIONS)
    b.add_argument("--micro", action="store_true", help="add single-operation rows (always on with --function all)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default: stdout)")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("transmit-bench", help="time decrypting one report per user into the enclave")
    t.add_argument("--users", type=_users, default=[1000])
    t.add_argument("--iterations", type=_iterations, default=bench.MIN_ITERATIONS)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", help="CSV path (default: stdout)")
    t.set_defaults(func=cmd_transmit)

    v = sub.add_parser("vectors", help="print known-answer vectors as JSON")
    v.set_defaults(func=cmd_vectors)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
