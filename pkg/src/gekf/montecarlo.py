"""Ensemble estimates of E||P_k|| and E||P_beta_j||, divergence verdicts,
(p, q) grid sweeps and the coupled-chain monotonicity harness.

Seeding rule: an ensemble rooted at ``SeedSequence(entropy=s, spawn_key=key)``
gives trial ``t`` the stream ``SeedSequence(entropy=s, spawn_key=key + (t,))``
(what ``SeedSequence.spawn`` would hand out). A sweep roots grid point
``(i, j)`` (p index, q index) at ``spawn_key=(i, j)``. Averages over
trials use ``math.fsum`` so they do not depend on trial order.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .channel import (
    GilbertElliott,
    SeedLike,
    coupled_sample,
    sample_gammas,
    stopping_times,
)
from .errors import PreconditionError
from .filtering import run_covariance_batch
from .model import LtiSystem, has_defective_unit_eigenvalue

__all__ = [
    "EnsembleEstimate",
    "CurvePoint",
    "SweepResult",
    "MonotonicityReport",
    "PeakConsistencyReport",
    "DEFAULT_STEPS",
    "DEFAULT_TRIALS",
    "DEFAULT_SLOPE_EPS",
    "trial_seeds",
    "estimate",
    "classify",
    "tail_index",
    "log_slope",
    "sweep",
    "monotonicity_test",
    "theorem3_consistency",
    "write_estimate_csv",
    "write_sweep_csv",
    "default_threads",
]

DEFAULT_STEPS = 1000
DEFAULT_TRIALS = 500
DEFAULT_SLOPE_EPS = 1e-3
#: tail-index band: alpha below 1 - margin means an infinite stationary mean
TAIL_MARGIN = 0.15
TAIL_FRACTION = 0.01
#: disjoint trial groups used for the slope standard error
SLOPE_GROUPS = 10


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("GEKF_THREADS", "1")))
    except ValueError:
        return 1


def _root(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, np.random.Generator):
        raise TypeError("ensembles need an int or SeedSequence seed, not a Generator")
    return np.random.SeedSequence(seed)


def trial_seeds(seed: SeedLike, count: int) -> list[np.random.SeedSequence]:
    root = _root(seed)
    return [
        np.random.SeedSequence(entropy=root.entropy, spawn_key=tuple(root.spawn_key) + (t,))
        for t in range(count)
    ]


def log_slope(values: np.ndarray, x: np.ndarray | None = None) -> float:
    """Least-squares slope of ``log(values)``; ``inf`` if any value is not finite."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return float("nan")
    if not np.all(np.isfinite(values)):
        return float("inf")
    x = np.arange(values.size, dtype=float) if x is None else np.asarray(x, dtype=float)
    y = np.log(np.maximum(values, np.finfo(float).tiny))
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def tail_index(values: np.ndarray, fraction: float = TAIL_FRACTION, min_count: int = 50) -> float:
    """Hill estimate of the tail exponent from the top ``fraction`` of ``values``.

    ``nan`` when there are too few positive samples to fit.
    """
    x = np.asarray(values, dtype=float).ravel()
    x = x[np.isfinite(x) & (x > 0)]
    k = max(min_count, int(fraction * x.size))
    if x.size <= k:
        return float("nan")
    top = np.partition(x, x.size - k - 1)[x.size - k - 1:]
    top.sort()
    logs = np.log(top[1:] / top[0])
    mean = math.fsum(logs) / k
    return float("inf") if mean == 0.0 else 1.0 / mean


def classify(slope: float, overflowed: bool, eps: float, alpha: float | None = None,
             slope_se: float = 0.0, margin: float = TAIL_MARGIN) -> str:
    """Combine the log-mean slope with an optional tail index ``alpha``.

    A slope counts as growth only when it exceeds ``eps`` by two standard
    errors. A tail exponent below one means the limiting law of ``||P_k||``
    has no mean, so ``E||P_k||`` grows without bound even when the sample
    mean of a finite ensemble looks flat.
    """
    heavy = alpha is not None and alpha < 1.0 - margin
    if overflowed or slope - 2.0 * slope_se > eps or heavy:
        return "diverging"
    light = alpha is None or alpha > 1.0 + margin
    if abs(slope) <= eps and light:
        return "bounded"
    return "inconclusive"


@dataclass
class EnsembleEstimate:
    """Monte Carlo summary; ``mean_norms[k - 1]`` estimates E||P_k||."""

    horizon: int
    trials: int
    mean_norms: np.ndarray
    stderr_norms: np.ndarray
    diverged_by_step: np.ndarray
    peak_means: np.ndarray
    peak_counts: np.ndarray
    diverged_fraction: float
    slope: float
    verdict: str
    peak_slope: float
    peak_verdict: str
    slope_eps: float
    tail_index: float = float("nan")
    peak_tail_index: float = float("nan")
    slope_se: float = 0.0
    notes: list[str] = field(default_factory=list)


def _mean_over_trials(norms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    N, T = norms.shape
    means = np.empty(T)
    errs = np.empty(T)
    for k in range(T):
        col = norms[:, k]
        if not np.all(np.isfinite(col)):
            means[k] = errs[k] = np.inf
            continue
        mu = math.fsum(col) / N
        means[k] = mu
        with np.errstate(over="ignore"):  # near-overflow trials give an infinite stderr
            errs[k] = math.sqrt(math.fsum((col - mu) ** 2) / max(N - 1, 1) / N) if N > 1 else 0.0
    return means, errs


def _peak_stats(norms: np.ndarray, gammas: np.ndarray):
    """Per-index peak means and counts, plus the pooled peaks of the second half."""
    per_trial = []
    late = []
    half = norms.shape[1] // 2
    for row_g, row_n in zip(gammas, norms):
        betas = stopping_times(row_g).betas
        per_trial.append(row_n[betas - 1])
        late.append(row_n[betas[betas > half] - 1])
    depth = max((v.size for v in per_trial), default=0)
    counts = np.zeros(depth, dtype=np.int64)
    means = np.full(depth, np.nan)
    for j in range(depth):
        vals = [v[j] for v in per_trial if v.size > j]
        counts[j] = len(vals)
        arr = np.asarray(vals)
        means[j] = np.inf if not np.all(np.isfinite(arr)) else math.fsum(arr) / arr.size
    return means, counts, np.concatenate(late) if late else np.empty(0)


def _peak_slope(peak_means, peak_counts, trials) -> tuple[float, bool]:
    usable = np.flatnonzero(peak_counts >= max(1, trials // 2))
    if usable.size < 4:
        return float("nan"), False
    sel = usable[usable.size // 2:]
    vals = peak_means[sel]
    return log_slope(vals, sel), not np.all(np.isfinite(vals))


def _spread(slopes: list[float]) -> float:
    """Standard error of the pooled slope from per-group slopes."""
    vals = np.asarray([v for v in slopes if np.isfinite(v)])
    if vals.size < 2:
        return 0.0
    return float(vals.std(ddof=1) / math.sqrt(vals.size))


def _slope_errors(norms: np.ndarray, gammas: np.ndarray, groups: int = SLOPE_GROUPS) -> tuple[float, float]:
    """Standard errors of the mean and peak slopes from disjoint trial groups."""
    N, T = norms.shape
    if N < 2 * groups:
        return 0.0, 0.0
    x = np.arange(T // 2, T)
    mean_slopes, peak_slopes = [], []
    for idx in np.array_split(np.arange(N), groups):
        m, _ = _mean_over_trials(norms[idx])
        mean_slopes.append(log_slope(m[T // 2:], x))
        pm, pc, _ = _peak_stats(norms[idx], gammas[idx])
        peak_slopes.append(_peak_slope(pm, pc, idx.size)[0])
    return _spread(mean_slopes), _spread(peak_slopes)


def _finite_or_none(alpha: float) -> float | None:
    return None if math.isnan(alpha) else alpha


def estimate(
    sys: LtiSystem,
    ch: GilbertElliott,
    T: int = DEFAULT_STEPS,
    N: int = DEFAULT_TRIALS,
    seed: SeedLike = 0,
    *,
    slope_eps: float = DEFAULT_SLOPE_EPS,
    sigma0=None,
) -> EnsembleEstimate:
    """Simulate ``N`` independent trials of ``T`` steps.

    The verdict fits a line to ``log E||P_k||`` over the last ``T/2`` steps
    and estimates the tail index of ``||P_k||`` pooled over those steps and
    all trials. It is "diverging" if any trial overflowed, the slope exceeds
    ``slope_eps`` per step by two standard errors (estimated from
    ``SLOPE_GROUPS`` disjoint groups of trials), or the tail index is below
    ``1 - TAIL_MARGIN``;
    "bounded" if ``|slope| <= slope_eps`` and the tail index exceeds
    ``1 + TAIL_MARGIN``; otherwise "inconclusive". Peaks get the same rule
    on the peak index axis with the slope threshold scaled by the mean
    loss-cycle length ``1/p + 1/q``.

    The tail test matters because ``E||P_k||`` can diverge through rare
    long loss runs: the sample mean of a finite ensemble then saturates at
    the largest excursion drawn and its slope is mostly noise.
    """
    if T < 2 or N < 1:
        raise ValueError(f"need T >= 2 and N >= 1, got T={T}, N={N}")
    seeds = trial_seeds(seed, N)
    gammas = np.stack([sample_gammas(ch, T, s) for s in seeds])
    norms, diverged = run_covariance_batch(sys, gammas, sigma0)
    means, errs = _mean_over_trials(norms)
    div_by_step = np.isinf(norms).mean(axis=0)
    tail = means[T // 2:]
    slope = log_slope(tail, np.arange(T // 2, T))
    alpha = tail_index(norms[:, T // 2:])
    peak_means, peak_counts, late_peaks = _peak_stats(norms, gammas)
    peak_alpha = tail_index(late_peaks)
    slope_se, peak_se = _slope_errors(norms, gammas)
    verdict = classify(slope, bool(diverged.any()), slope_eps, _finite_or_none(alpha), slope_se)
    cycle = 1.0 / ch.p + 1.0 / ch.q
    peak_slope, peak_over = _peak_slope(peak_means, peak_counts, N)
    if math.isnan(peak_slope):
        peak_verdict = "inconclusive"
    else:
        peak_verdict = classify(peak_slope, peak_over, slope_eps * cycle, _finite_or_none(peak_alpha), peak_se)
    notes = []
    if verdict == "inconclusive" or (peak_verdict != "inconclusive" and peak_verdict != verdict):
        notes.append(
            f"{N} trials: E||P_k|| is heavy-tailed near the critical curve, "
            "so verdicts there carry wide uncertainty"
        )
    return EnsembleEstimate(
        horizon=T,
        trials=N,
        mean_norms=means,
        stderr_norms=errs,
        diverged_by_step=div_by_step,
        peak_means=peak_means,
        peak_counts=peak_counts,
        diverged_fraction=float(diverged.mean()),
        slope=slope,
        verdict=verdict,
        peak_slope=peak_slope,
        peak_verdict=peak_verdict,
        slope_eps=slope_eps,
        tail_index=alpha,
        slope_se=slope_se,
        peak_tail_index=peak_alpha,
        notes=notes,
    )


# -- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    p: float
    q: float
    verdict: str
    slope: float


@dataclass
class SweepResult:
    points: list[CurvePoint]
    flags: list[str]


def _monotone_flags(points: Sequence[CurvePoint], p_grid, q_grid) -> list[str]:
    table = {(pt.p, pt.q): pt.verdict for pt in points}
    flags = []
    for q in q_grid:
        seen_div = None
        for p in p_grid:
            v = table[(p, q)]
            if v == "diverging" and seen_div is None:
                seen_div = p
            elif v == "bounded" and seen_div is not None:
                flags.append(f"q={q:.6g}: bounded at p={p:.6g} after diverging at p={seen_div:.6g}")
    for p in p_grid:
        seen_bnd = None
        for q in q_grid:
            v = table[(p, q)]
            if v == "bounded" and seen_bnd is None:
                seen_bnd = q
            elif v == "diverging" and seen_bnd is not None:
                flags.append(f"p={p:.6g}: diverging at q={q:.6g} after bounded at q={seen_bnd:.6g}")
    return flags


def sweep(
    sys: LtiSystem,
    p_grid: Sequence[float],
    q_grid: Sequence[float],
    T: int = DEFAULT_STEPS,
    N: int = DEFAULT_TRIALS,
    seed: int = 0,
    *,
    slope_eps: float = DEFAULT_SLOPE_EPS,
    sigma0=None,
    threads: int | None = None,
) -> SweepResult:
    """Classify every grid point; rows are ordered by q, then p.

    Verdict sequences that are not monotone along a grid line (bounded
    after diverging as p grows, or diverging after bounded as q grows) are
    reported in ``flags``.
    """
    p_grid = [float(v) for v in p_grid]
    q_grid = [float(v) for v in q_grid]
    for v in p_grid + q_grid:
        if not 0.0 < v < 1.0:
            raise ValueError(f"grid values must lie in (0, 1), got {v}")
    jobs = [(i, j, p, q) for j, q in enumerate(q_grid) for i, p in enumerate(p_grid)]

    def run(job):
        i, j, p, q = job
        root = np.random.SeedSequence(entropy=seed, spawn_key=(i, j))
        est = estimate(sys, GilbertElliott(p, q), T, N, root, slope_eps=slope_eps, sigma0=sigma0)
        return CurvePoint(p, q, est.verdict, est.slope)

    threads = default_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(run, jobs))
    else:
        points = [run(job) for job in jobs]
    return SweepResult(points=points, flags=_monotone_flags(points, p_grid, q_grid))


# -- coupling harness ---------------------------------------------------------


@dataclass
class MonotonicityReport:
    p1: float
    p2: float
    q: float
    trials: int
    horizon: int
    pathwise_ok: bool
    worst_violation: float
    mean_norms_p1: np.ndarray
    mean_norms_p2: np.ndarray
    ensemble_ok: bool
    forbidden_visits: int


def monotonicity_test(
    sys: LtiSystem,
    p1: float,
    p2: float,
    q: float,
    T: int = DEFAULT_STEPS,
    N: int = 100,
    seed: SeedLike = 0,
    *,
    tol: float = 1e-8,
) -> MonotonicityReport:
    """Drive the filter with both coordinates of the coupled loss chain and
    check ``P_k(z) >= P_k(z_tilde)`` in the PSD order at every step of every trial.

    ``worst_violation`` is the most negative eigenvalue of the difference
    divided by ``max(1, ||P_k(z)||)``; the order holds when it is at least
    ``-tol``. The ensemble check asks ``mean_1 >= mean_2 - 2 * stderr`` of
    the per-trial norm differences at every k.
    """
    seeds = trial_seeds(seed, N)
    pairs = np.stack([coupled_sample(p1, p2, q, T, s) for s in seeds])
    forbidden = int(np.sum((pairs[:, :, 0] == 1) & (pairs[:, :, 1] == 0)))
    n1, d1, c1 = run_covariance_batch(sys, pairs[:, :, 0], return_covs=True)
    n2, d2, c2 = run_covariance_batch(sys, pairs[:, :, 1], return_covs=True)
    finite = np.isfinite(n1) & np.isfinite(n2)
    diff = np.where(finite[..., None, None], c1 - c2, 0.0)
    low = np.linalg.eigvalsh(0.5 * (diff + np.swapaxes(diff, -1, -2)))[..., 0]
    scale = np.maximum(1.0, np.where(finite, n1, 1.0))
    worst = float(np.min(low / scale))
    # a trial that overflowed only under the worse channel is consistent with the order
    order_ok = worst >= -tol and not np.any(d2 & ~d1)
    m1, _ = _mean_over_trials(n1)
    m2, _ = _mean_over_trials(n2)
    nd = np.where(finite, n1 - n2, 0.0)
    sd = nd.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros(T)
    with np.errstate(invalid="ignore"):
        ens_ok = bool(np.all((m1 >= m2 - 2.0 * sd) | ~np.isfinite(m1)))
    return MonotonicityReport(
        p1=p1,
        p2=p2,
        q=q,
        trials=N,
        horizon=T,
        pathwise_ok=bool(order_ok and forbidden == 0),
        worst_violation=worst,
        mean_norms_p1=m1,
        mean_norms_p2=m2,
        ensemble_ok=ens_ok,
        forbidden_visits=forbidden,
    )


@dataclass
class PeakConsistencyReport:
    mean_verdict: str
    peak_verdict: str
    contradiction: bool
    estimate: EnsembleEstimate


def theorem3_consistency(
    sys: LtiSystem,
    ch: GilbertElliott,
    T: int = DEFAULT_STEPS,
    N: int = DEFAULT_TRIALS,
    seed: SeedLike = 0,
    **kwargs,
) -> PeakConsistencyReport:
    """Compare peak-time and all-time boundedness verdicts from one ensemble.

    Bounded peaks with diverging sampling-time means would contradict the
    peak-to-mean-square implication, so such runs are flagged.
    """
    if has_defective_unit_eigenvalue(sys.a):
        raise PreconditionError("A has a defective eigenvalue on the unit circle")
    est = estimate(sys, ch, T, N, seed, **kwargs)
    contradiction = est.peak_verdict == "bounded" and est.verdict == "diverging"
    return PeakConsistencyReport(est.verdict, est.peak_verdict, contradiction, est)


# -- CSV ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_estimate_csv(fh: TextIO, est: EnsembleEstimate) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "mean_norm", "diverged_fraction"])
    for k in range(est.horizon):
        w.writerow([k + 1, _fmt(est.mean_norms[k]), _fmt(est.diverged_by_step[k])])


def write_sweep_csv(fh: TextIO, points: Sequence[CurvePoint]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["p", "q", "verdict", "slope"])
    for pt in points:
        w.writerow([_fmt(pt.p), _fmt(pt.q), pt.verdict, _fmt(pt.slope)])
