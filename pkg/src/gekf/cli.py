"""Command-line front end: ``gekf {check,bound,simulate,sweep,verify}``.

Exit codes: 0 success or verdict available, 1 usage or I/O error,
2 inconclusive or failed precondition.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import sys
from typing import Iterator, Sequence, TextIO

import numpy as np

from . import __version__
from .channel import GilbertElliott, sample
from .errors import ConvergenceError, ModelError, PreconditionError
from .filtering import run_covariance, write_covariance_csv, write_peaks_csv
from .model import build_stacks, load_system
from .montecarlo import (
    DEFAULT_SLOPE_EPS,
    DEFAULT_STEPS,
    DEFAULT_TRIALS,
    default_threads,
    estimate,
    sweep,
    trial_seeds,
    write_estimate_csv,
    write_sweep_csv,
)
from .stability import bound_search, full_report, necessary_check, prop1_max_p

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INCONCLUSIVE = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for inconclusive results
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _probability(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"probability must lie strictly inside (0, 1), got {v}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            parts = [float(s) for s in text.split(":")]
            if len(parts) != 3:
                raise ValueError
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise argparse.ArgumentTypeError(f"grid needs step > 0 and stop >= start: {text!r}")
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [round(start + i * step, 12) for i in range(count)]
        else:
            values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; expected start:stop:step or a,b,c") from None
    if not values:
        raise argparse.ArgumentTypeError(f"empty grid {text!r}")
    for v in values:
        if not 0.0 < v < 1.0:
            raise argparse.ArgumentTypeError(f"grid value {v} outside (0, 1)")
    return values


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _json_safe(obj.item())
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


@contextlib.contextmanager
def _output(path: str | None) -> Iterator[TextIO]:
    if path is None or path == "-":
        yield sys.stdout
        return
    try:
        fh = open(path, "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None
    with fh:
        yield fh


def _dump_json(data: dict, path: str | None) -> None:
    with _output(path) as fh:
        json.dump(_json_safe(data), fh, indent=2, allow_nan=False)
        fh.write("\n")


def _load(path: str):
    try:
        return load_system(path)
    except FileNotFoundError:
        raise UsageError(f"system file not found: {path}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def cmd_check(args) -> int:
    sysm = _load(args.system)
    report = full_report(sysm, args.p, args.q, seed=args.seed, tol=args.tol)
    _dump_json(report.to_dict() | {"verdict_available": report.verdict_available}, args.out)
    return EXIT_OK if report.verdict_available else EXIT_INCONCLUSIVE


def cmd_bound(args) -> int:
    sysm = _load(args.system)
    ok, value = necessary_check(sysm, args.q)
    if not ok:
        print(
            f"necessary condition fails: (1 - q) * rho(A)^2 = {value:.6g} >= 1; no failure rate is stable",
            file=sys.stderr,
        )
        return EXIT_INCONCLUSIVE
    res = bound_search(sysm, build_stacks(sysm), args.q, tol=args.tol, seed=args.seed)
    data = {
        "q": args.q,
        "p_lower_bound": res.value,
        "tol": res.tol,
        "prop1_max_p": prop1_max_p(sysm, args.q),
        "necessary_value": value,
        "monotone": res.monotone,
        "probes": [{"p": p, "feasible": f, "radius": r} for p, f, r in res.evaluations],
        "notes": list(res.notes),
    }
    _dump_json(data, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    sysm = _load(args.system)
    sigma0 = sysm.sigma0 * args.sigma0_scale
    ch = GilbertElliott(args.p, args.q)
    if args.trials == 1:
        # same stream as trial 0 of an ensemble with this seed
        traj = sample(ch, args.steps, trial_seeds(args.seed, 1)[0])
        cov = run_covariance(sysm, traj, sigma0=sigma0)
        with _output(args.out) as fh:
            write_covariance_csv(fh, cov)
        if args.peaks_out:
            with _output(args.peaks_out) as fh:
                write_peaks_csv(fh, cov)
        if cov.diverged:
            print(f"trajectory overflowed at k={cov.length + 1}", file=sys.stderr)
        return EXIT_OK
    if args.peaks_out:
        raise UsageError("--peaks-out needs --trials 1")
    est = estimate(sysm, ch, args.steps, args.trials, args.seed, slope_eps=args.slope_eps, sigma0=sigma0)
    with _output(args.out) as fh:
        write_estimate_csv(fh, est)
    print(
        f"verdict={est.verdict} slope={est.slope:.6g} slope_se={est.slope_se:.3g} "
        f"tail_index={est.tail_index:.4g} peak_verdict={est.peak_verdict} "
        f"diverged_fraction={est.diverged_fraction:.6g}",
        file=sys.stderr,
    )
    for note in est.notes:
        print(f"note: {note}", file=sys.stderr)
    return EXIT_OK if est.verdict != "inconclusive" else EXIT_INCONCLUSIVE


def cmd_sweep(args) -> int:
    sysm = _load(args.system)
    res = sweep(
        sysm,
        args.p_grid,
        args.q_grid,
        args.steps,
        args.trials,
        args.seed,
        slope_eps=args.slope_eps,
        threads=args.threads,
    )
    with _output(args.out) as fh:
        write_sweep_csv(fh, res.points)
    for flag in res.flags:
        print(f"flag: {flag}", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    results = run_suite(args.seed)
    with _output(args.out) as fh:
        for r in results:
            fh.write(r.line() + "\n")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed properties: " + ", ".join(failed), file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gekf", description="Kalman filtering over a Gilbert-Elliott channel.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, need_p: bool = True):
        sp.add_argument("--system", required=True, help="system JSON (example1.json, example2.json are bundled)")
        if need_p:
            sp.add_argument("--p", type=_probability, required=True, help="failure rate P(loss | arrival)")
        sp.add_argument("--q", type=_probability, required=True, help="recovery rate P(arrival | loss)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default=None, help="output file (default stdout)")

    sp = sub.add_parser("check", help="run every stability test at (p, q); JSON report")
    common(sp)
    sp.add_argument("--tol", type=_positive_float, default=1e-3, help="bisection tolerance for the p lower bound")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("bound", help="lower bound on the critical failure rate; JSON")
    common(sp, need_p=False)
    sp.add_argument("--tol", type=_positive_float, default=1e-3)
    sp.set_defaults(func=cmd_bound)

    sp = sub.add_parser("simulate", help="Monte Carlo covariance trajectories; CSV")
    common(sp)
    sp.add_argument("--steps", type=_positive_int, default=DEFAULT_STEPS)
    sp.add_argument("--trials", type=_positive_int, default=DEFAULT_TRIALS)
    sp.add_argument("--peaks-out", default=None, help="peak covariance CSV (single trial only)")
    sp.add_argument("--sigma0-scale", type=_positive_float, default=1.0, help="multiply the initial covariance")
    sp.add_argument("--slope-eps", type=_positive_float, default=DEFAULT_SLOPE_EPS)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="classify a (p, q) grid; CSV")
    sp.add_argument("--system", required=True)
    sp.add_argument("--p-grid", type=parse_grid, required=True, help="start:stop:step or a,b,c")
    sp.add_argument("--q-grid", type=parse_grid, required=True)
    sp.add_argument("--steps", type=_positive_int, default=DEFAULT_STEPS)
    sp.add_argument("--trials", type=_positive_int, default=DEFAULT_TRIALS)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--slope-eps", type=_positive_float, default=DEFAULT_SLOPE_EPS)
    sp.add_argument("--threads", type=_positive_int, default=None, help="worker threads (default $GEKF_THREADS or 1)")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the randomized property suite")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", 1) is None:
        args.threads = default_threads()
    try:
        return args.func(args)
    except (UsageError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE
    except ConvergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE


if __name__ == "__main__":
    sys.exit(main())
