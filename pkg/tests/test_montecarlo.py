import io

import numpy as np
import pytest

from gekf.channel import GilbertElliott
from gekf.errors import PreconditionError
from gekf.model import LtiSystem
from gekf.montecarlo import (
    CurvePoint,
    _monotone_flags,
    classify,
    default_threads,
    estimate,
    log_slope,
    tail_index,
    monotonicity_test,
    sweep,
    theorem3_consistency,
    trial_seeds,
    write_estimate_csv,
    write_sweep_csv,
)
from gekf.numerics import dare_solve


def test_trial_seeds_deterministic_and_distinct():
    a = [s.generate_state(2).tolist() for s in trial_seeds(5, 4)]
    b = [s.generate_state(2).tolist() for s in trial_seeds(5, 4)]
    assert a == b
    assert len({tuple(x) for x in a}) == 4
    # prefix stability: more trials never change the earlier streams
    c = [s.generate_state(2).tolist() for s in trial_seeds(5, 6)]
    assert c[:4] == a


def test_log_slope_and_classify():
    k = np.arange(50)
    assert log_slope(np.exp(0.01 * k)) == pytest.approx(0.01)
    assert log_slope(np.array([1.0, np.inf])) == float("inf")
    assert classify(0.01, False, 1e-3) == "diverging"
    assert classify(-5e-4, False, 1e-3) == "bounded"
    assert classify(-0.01, False, 1e-3) == "inconclusive"
    assert classify(0.0, True, 1e-3) == "diverging"
    # growth must clear the threshold by two standard errors
    assert classify(0.01, False, 1e-3, slope_se=0.01) == "inconclusive"
    # a tail exponent below one forces divergence, near one blocks a bounded verdict
    assert classify(0.0, False, 1e-3, alpha=0.5) == "diverging"
    assert classify(0.0, False, 1e-3, alpha=1.0) == "inconclusive"
    assert classify(0.0, False, 1e-3, alpha=3.0) == "bounded"


@pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0])
def test_tail_index_recovers_pareto_exponent(alpha):
    x = np.random.default_rng(0).pareto(alpha, 200_000) + 1.0
    assert tail_index(x) == pytest.approx(alpha, rel=0.05)


def test_tail_index_degenerate_inputs():
    assert np.isnan(tail_index(np.ones(10)))
    assert tail_index(np.ones(1000)) == float("inf")


def test_heavy_tail_divergence_without_slope():
    # the mean blows up through rare long loss runs while typical paths stay put
    s = LtiSystem([[1.2]], [[1.0]], [[1.0]], [[1.0]])
    est = estimate(s, GilbertElliott(0.9, 0.2), 1000, 200, 3)
    assert est.verdict == "diverging" and est.tail_index < 0.85


def test_default_threads_env(monkeypatch):
    monkeypatch.setenv("GEKF_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("GEKF_THREADS", "junk")
    assert default_threads() == 1


def test_rare_losses_approach_dare(ex1):
    est = estimate(ex1, GilbertElliott(1e-4, 0.9), 200, 50, 1)
    pt, _ = dare_solve(ex1)
    assert est.mean_norms[-1] == pytest.approx(np.linalg.norm(pt, 2), rel=0.05)
    assert est.verdict == "bounded"


def test_estimate_is_deterministic(ex2):
    ch = GilbertElliott(0.6, 0.5)
    a = estimate(ex2, ch, 300, 40, 3)
    b = estimate(ex2, ch, 300, 40, 3)
    np.testing.assert_array_equal(a.mean_norms, b.mean_norms)
    np.testing.assert_array_equal(a.peak_means, b.peak_means)
    assert a.verdict == b.verdict
    c = estimate(ex2, ch, 300, 40, 4)
    assert not np.array_equal(a.mean_norms, c.mean_norms)


def test_overflow_counts_as_diverging():
    s = LtiSystem([[1e3]], [[1.0]], [[1.0]], [[1.0]])
    est = estimate(s, GilbertElliott(0.9, 0.05), 1000, 20, 0)
    assert est.verdict == "diverging"
    assert est.diverged_fraction > 0


def test_clear_divergence_and_boundedness(ex1, ex2):
    assert estimate(ex2, GilbertElliott(0.99, 0.5), 600, 100, 7).verdict == "diverging"
    assert estimate(ex1, GilbertElliott(0.3, 0.8), 600, 100, 7).verdict == "bounded"


def test_sweep_threads_do_not_change_results(ex1):
    grid_p, grid_q = [0.2, 0.6], [0.5, 0.8]
    a = sweep(ex1, grid_p, grid_q, 200, 20, 9, threads=1)
    b = sweep(ex1, grid_p, grid_q, 200, 20, 9, threads=3)
    assert a.points == b.points
    assert [(pt.p, pt.q) for pt in a.points] == [(0.2, 0.5), (0.6, 0.5), (0.2, 0.8), (0.6, 0.8)]


def test_sweep_rejects_bad_grid(ex1):
    with pytest.raises(ValueError):
        sweep(ex1, [0.0, 0.5], [0.5], 10, 2, 0)


def test_monotone_flags():
    pts = [
        CurvePoint(0.1, 0.5, "bounded", 0.0),
        CurvePoint(0.5, 0.5, "diverging", 0.1),
        CurvePoint(0.9, 0.5, "bounded", 0.0),
    ]
    flags = _monotone_flags(pts, [0.1, 0.5, 0.9], [0.5])
    assert len(flags) == 1 and "p=0.9" in flags[0]
    pts = [CurvePoint(0.5, 0.3, "diverging", 1.0), CurvePoint(0.5, 0.7, "bounded", 0.0)]
    assert _monotone_flags(pts, [0.5], [0.3, 0.7]) == []


def test_coupling_order(ex2):
    rep = monotonicity_test(ex2, 0.5, 0.2, 0.5, T=300, N=30, seed=2)
    assert rep.pathwise_ok and rep.ensemble_ok
    assert rep.forbidden_visits == 0


def test_coupling_degenerate_equal_rates(ex1):
    rep = monotonicity_test(ex1, 0.3, 0.3, 0.6, T=200, N=10, seed=0)
    assert rep.worst_violation == 0.0
    np.testing.assert_array_equal(rep.mean_norms_p1, rep.mean_norms_p2)


def test_peak_mean_consistency(ex1):
    rep = theorem3_consistency(ex1, GilbertElliott(0.5, 0.65), 500, 100, 1)
    assert not rep.contradiction
    assert rep.mean_verdict == rep.peak_verdict == "bounded"
    defective = LtiSystem([[1.0, 1.0], [0.0, 1.0]], [[1.0, 0.0]], np.eye(2), [[1.0]])
    with pytest.raises(PreconditionError):
        theorem3_consistency(defective, GilbertElliott(0.5, 0.5), 10, 2, 0)


def test_csv_writers(ex1):
    est = estimate(ex1, GilbertElliott(0.5, 0.65), 5, 3, 0)
    buf = io.StringIO()
    write_estimate_csv(buf, est)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "k,mean_norm,diverged_fraction" and len(lines) == 6
    assert lines[1] == "1,1,0"
    buf = io.StringIO()
    write_sweep_csv(buf, [CurvePoint(0.1, 0.5, "bounded", 0.25)])
    assert buf.getvalue() == "p,q,verdict,slope\n0.10000000000000001,0.5,bounded,0.25\n"


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_verdicts_hold_across_seeds(ex1, ex2, seed):
    assert estimate(ex2, GilbertElliott(0.99, 0.5), 1000, 100, seed).verdict == "diverging"
    assert estimate(ex1, GilbertElliott(0.99, 0.65), 1000, 100, seed).verdict == "bounded"
