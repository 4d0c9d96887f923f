"""Acceptance criteria, one test (or parametrized group) per criterion.

A PASS/FAIL line per criterion is printed in the terminal summary by
``conftest.pytest_terminal_summary``.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from gekf.channel import GilbertElliott
from gekf.model import build_stacks
from gekf.montecarlo import estimate
from gekf.numerics import rho
from gekf.stability import GainSet, bound_search, build_h_of_k, find_gain, h0_radius_closed_form, prop1_max_p
from gekf.verify import random_system, run_suite

MC_SEED = 7


@pytest.fixture
def criterion(record_property):
    def mark(label):
        record_property("criterion", label)

    return mark


def test_closed_form_max_failure_rate(ex1, criterion):
    criterion("1. zero-gain closed form: max p = 0.22 +/- 1e-3 (example I, q = 0.65), < 1 s")
    t0 = time.perf_counter()
    value = prop1_max_p(ex1, 0.65)
    elapsed = time.perf_counter() - t0
    assert value == pytest.approx(0.22, abs=1e-3)
    assert elapsed < 1.0


@pytest.mark.parametrize("p, expected", [(0.04, 0.0580), (0.22, 0.2529)])
def test_stationary_loss_probability(criterion, p, expected):
    criterion("2. stationary P(gamma = 0) = 0.0580 and 0.2529 +/- 5e-5")
    assert GilbertElliott(p, 0.65).stationary()[1] == pytest.approx(expected, abs=5e-5)


def test_gain_feasible_at_high_failure_rate(ex1, criterion):
    criterion("3. gain search succeeds at p = 0.99 (example I, q = 0.65), < 30 s")
    t0 = time.perf_counter()
    res = find_gain(ex1, build_stacks(ex1), 0.99, 0.65)
    elapsed = time.perf_counter() - t0
    assert res.success and res.radius < 1.0
    assert elapsed < 30.0


def test_lower_bound_on_critical_rate(ex2, criterion):
    criterion("4. lower bound on critical p = 0.465 +/- 0.01 (example II, q = 0.5), < 5 min")
    t0 = time.perf_counter()
    res = bound_search(ex2, build_stacks(ex2), 0.5)
    elapsed = time.perf_counter() - t0
    assert res.value == pytest.approx(0.465, abs=0.01)
    assert elapsed < 300.0


@pytest.mark.parametrize(
    "system, p, q, expected",
    [
        ("ex1", 0.5, 0.65, "bounded"),
        ("ex1", 0.99, 0.65, "bounded"),
        ("ex2", 0.99, 0.5, "diverging"),
    ],
)
def test_monte_carlo_classification(request, criterion, system, p, q, expected):
    criterion("5. Monte Carlo verdicts, T = 1000, N = 500, fixed seed, < 2 min each")
    sysm = request.getfixturevalue(system)
    t0 = time.perf_counter()
    est = estimate(sysm, GilbertElliott(p, q), 1000, 500, MC_SEED)
    elapsed = time.perf_counter() - t0
    assert est.verdict == expected
    assert elapsed < 120.0


def test_zero_gain_radius_oracle(criterion):
    criterion("6. rho(H(0)) eigensolver vs closed form to 1e-8 on 20 random instances, < 10 s")
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    checked = 0
    while checked < 20:
        s = random_system(rng, radius=(1.0, 1.6))
        stacks = build_stacks(s)
        lam2 = rho(s.a) ** 2
        q = rng.uniform(1.0 - 1.0 / lam2 + 0.01, 0.99)
        p = rng.uniform(0.01, 0.99)
        numeric = rho(build_h_of_k(s, stacks, GainSet.zeros(stacks, s.n), p, q))
        closed = h0_radius_closed_form(s, p, q)
        assert abs(numeric - closed) <= 1e-8 * max(1.0, closed)
        checked += 1
    assert time.perf_counter() - t0 < 10.0


def test_property_suite(criterion):
    criterion("7. verify property suite passes, < 2 min")
    t0 = time.perf_counter()
    results = run_suite(1)
    elapsed = time.perf_counter() - t0
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed
    assert len(results) == 7
    assert elapsed < 120.0


DETERMINISM_COMMANDS = {
    "check": ["check", "--system", "example1.json", "--p", "0.5", "--q", "0.65"],
    "bound": ["bound", "--system", "example2.json", "--q", "0.5"],
    "simulate-single": ["simulate", "--system", "example1.json", "--p", "0.5", "--q", "0.65",
                        "--steps", "1000", "--trials", "1", "--seed", "7"],
    "simulate-ensemble": ["simulate", "--system", "example2.json", "--p", "0.99", "--q", "0.5",
                          "--steps", "500", "--trials", "100", "--seed", "7"],
    "sweep": ["sweep", "--system", "example1.json", "--p-grid", "0.2:0.8:0.3", "--q-grid", "0.5,0.9",
              "--steps", "300", "--trials", "50", "--seed", "3"],
    "verify": ["verify", "--seed", "1"],
}


@pytest.mark.parametrize("name", sorted(DETERMINISM_COMMANDS))
def test_cli_outputs_are_byte_identical(criterion, tmp_path, name):
    criterion("8. repeated CLI commands give byte-identical output files")
    outputs = []
    for run in range(2):
        out = tmp_path / f"{name}-{run}.out"
        cmd = [sys.executable, "-m", "gekf", *DETERMINISM_COMMANDS[name], "--out", str(out)]
        proc = subprocess.run(cmd, cwd=tmp_path, capture_output=True, text=True, timeout=600)
        assert proc.returncode in (0, 2), proc.stderr
        outputs.append(out.read_bytes())
    assert outputs[0] and outputs[0] == outputs[1]
