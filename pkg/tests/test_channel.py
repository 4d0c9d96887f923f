import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gekf.channel import (
    COUPLED_STATES,
    GilbertElliott,
    _chain_from_uniforms,
    coupled_sample,
    coupled_transition_matrix,
    make_rng,
    sample,
    sample_gammas,
    stopping_times,
    write_coupled_csv,
    write_trajectory_csv,
)
from gekf.errors import PreconditionError

prob = st.floats(0.01, 0.99)


def naive_chain(u, p, q, start):
    out = [start]
    for x in u:
        s = out[-1]
        out.append(int(x >= p) if s == 1 else int(x < q))
    return np.array(out)


@settings(max_examples=100, deadline=None)
@given(prob, prob, st.integers(0, 1), st.integers(0, 2**32 - 1), st.integers(1, 300))
def test_vectorized_chain_matches_loop(p, q, start, seed, steps):
    u = make_rng(seed).random(steps)
    np.testing.assert_array_equal(_chain_from_uniforms(u, p, q, start)[0], naive_chain(u, p, q, start))


def test_stationary_values():
    assert GilbertElliott(0.04, 0.65).stationary()[1] == pytest.approx(0.0580, abs=5e-5)
    assert GilbertElliott(0.22, 0.65).stationary()[1] == pytest.approx(0.2529, abs=5e-5)
    assert GilbertElliott(0.3, 0.3).stationary() == pytest.approx((0.5, 0.5))


def test_stationary_is_left_eigenvector():
    ch = GilbertElliott(0.2, 0.7)
    pi1, pi0 = ch.stationary()
    pi = np.array([pi0, pi1])
    np.testing.assert_allclose(pi @ ch.transition_matrix, pi)


def test_invalid_rates():
    for p, q in ((0.0, 0.5), (1.0, 0.5), (0.5, 1.0), (0.5, -0.1)):
        with pytest.raises(ValueError):
            GilbertElliott(p, q)


def test_stopping_times_worked_example():
    tr = stopping_times([1, 1, 0, 0, 1, 0, 1])
    assert tr.taus.tolist() == [3, 6]
    assert tr.betas.tolist() == [5, 7]
    assert tr.tau_stars.tolist() == [2, 1]
    assert tr.beta_stars.tolist() == [2, 1]


def test_stopping_times_incomplete_burst_dropped():
    tr = stopping_times([1, 0, 1, 1, 0, 0])
    assert tr.taus.tolist() == [2, 5]
    assert tr.betas.tolist() == [3]
    assert tr.beta_stars.tolist() == [1]


def test_stopping_times_rejects_non_binary():
    with pytest.raises(ValueError):
        stopping_times([1, 2, 0])


def test_sample_deterministic_and_starts_at_one():
    ch = GilbertElliott(0.3, 0.6)
    a, b = sample(ch, 500, 42), sample(ch, 500, 42)
    np.testing.assert_array_equal(a.gammas, b.gammas)
    assert a.gammas[0] == 1
    assert not np.array_equal(a.gammas, sample(ch, 500, 43).gammas)


def test_ergodic_loss_fraction():
    p, q = 0.05, 0.4
    g = sample_gammas(GilbertElliott(p, q), 1_000_000, 3)
    pi0 = p / (p + q)
    # autocorrelation 1-p-q inflates the variance of the mean
    lag = 1 - p - q
    sigma = np.sqrt(pi0 * (1 - pi0) / g.size * (1 + lag) / (1 - lag))
    assert abs((g == 0).mean() - pi0) < 3 * sigma


def test_empirical_transition_frequencies():
    p, q = 0.2, 0.55
    g = sample_gammas(GilbertElliott(p, q), 400_000, 11)
    prev, nxt = g[:-1], g[1:]
    n1, n0 = (prev == 1).sum(), (prev == 0).sum()
    assert abs(((prev == 1) & (nxt == 0)).sum() / n1 - p) < 3 * np.sqrt(p * (1 - p) / n1)
    assert abs(((prev == 0) & (nxt == 1)).sum() / n0 - q) < 3 * np.sqrt(q * (1 - q) / n0)


def test_coupled_transition_rows_sum_to_one():
    for p1, p2, q in ((0.5, 0.2, 0.6), (0.9, 0.1, 0.5), (0.3, 0.3, 0.7)):
        m = coupled_transition_matrix(p1, p2, q)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert (m >= 0).all()


def test_coupled_marginals_are_exact():
    p1, p2, q = 0.6, 0.25, 0.5
    m = coupled_transition_matrix(p1, p2, q)
    for idx, (z, zt) in enumerate(COUPLED_STATES):
        to_z1 = sum(m[idx, j] for j, s in enumerate(COUPLED_STATES) if s[0] == 1)
        to_zt1 = sum(m[idx, j] for j, s in enumerate(COUPLED_STATES) if s[1] == 1)
        assert to_z1 == pytest.approx(1 - p1 if z == 1 else q)
        assert to_zt1 == pytest.approx(1 - p2 if zt == 1 else q)


def test_coupled_sample_order_and_occupancy():
    p1, p2, q = 0.4, 0.15, 0.5
    pairs = coupled_sample(p1, p2, q, 300_000, 5)
    assert (pairs[:, 0] <= pairs[:, 1]).all()
    assert tuple(pairs[0]) == (1, 1)
    n = len(pairs)
    occ00 = np.mean((pairs[:, 0] == 0) & (pairs[:, 1] == 0))
    occ11 = np.mean((pairs[:, 0] == 1) & (pairs[:, 1] == 1))
    # loose 3-sigma with a correlation allowance
    assert abs(occ00 - p2 / (p2 + q)) < 3 * 4 / np.sqrt(n)
    assert abs(occ11 - q / (p1 + q)) < 3 * 4 / np.sqrt(n)
    z = pairs[:, 0]
    prev, nxt = z[:-1], z[1:]
    assert abs(((prev == 1) & (nxt == 0)).sum() / (prev == 1).sum() - p1) < 0.01


def test_coupled_equal_rates_identical_paths():
    pairs = coupled_sample(0.3, 0.3, 0.6, 2000, 1)
    np.testing.assert_array_equal(pairs[:, 0], pairs[:, 1])


def test_coupled_preconditions():
    with pytest.raises(PreconditionError):
        coupled_sample(0.8, 0.6, 0.5, 10, 0)
    with pytest.raises(ValueError):
        coupled_sample(0.2, 0.3, 0.5, 10, 0)


def test_csv_writers():
    buf = io.StringIO()
    write_trajectory_csv(buf, stopping_times([1, 0, 1]))
    assert buf.getvalue() == "k,gamma\n1,1\n2,0\n3,1\n"
    buf = io.StringIO()
    write_coupled_csv(buf, np.array([[1, 1], [0, 1]]))
    assert buf.getvalue() == "k,z,z_tilde\n1,1,1\n2,0,1\n"
