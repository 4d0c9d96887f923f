"""Randomized property suite behind ``gekf verify``.

Each check returns a :class:`PropertyResult`; details are deterministic
for a given seed so the suite's printed output is reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .channel import GilbertElliott, make_rng, sample
from .errors import ModelError
from .filtering import g_iter, g_op, h_op, optimal_phi_gain, phi_op
from .model import LtiSystem, build_stacks, bundled_system, observability_index
from .montecarlo import monotonicity_test
from .numerics import dare_solve, kron, min_eig, rho, unvec, vec
from .stability import GainSet, apply_l_k, build_h_of_k, l_k_matrix, necessary_check

__all__ = ["PropertyResult", "run_suite", "PROPERTIES", "random_system", "random_psd"]

EIG_TOL = 1e-9


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def random_psd(rng: np.random.Generator, n: int, scale: float = 1.0, rank: int | None = None) -> np.ndarray:
    g = rng.standard_normal((n, n if rank is None else rank))
    return scale * (g @ g.T) / n


def random_system(
    rng: np.random.Generator, n: int | None = None, m: int | None = None, radius: tuple[float, float] = (1.0, 1.6)
) -> LtiSystem:
    """Random observable plant with spectral radius in ``radius``."""
    while True:
        nn = int(rng.integers(2, 4)) if n is None else n
        mm = int(rng.integers(1, nn)) if m is None else m
        a = rng.standard_normal((nn, nn))
        a *= rng.uniform(*radius) / rho(a)
        c = rng.standard_normal((mm, nn))
        q = random_psd(rng, nn) + 0.1 * np.eye(nn)
        r = random_psd(rng, mm) + 0.1 * np.eye(mm)
        sysm = LtiSystem(a, c, q, r, np.eye(nn))
        try:
            observability_index(sysm)
        except ModelError:
            continue
        return sysm


def _rel_min_eig(x: np.ndarray, scale_of: np.ndarray) -> float:
    return min_eig(x) / max(1.0, float(np.linalg.norm(scale_of, 2)))


def check_sojourns(seed: int) -> PropertyResult:
    """Sojourn lengths minus one are geometric(p) in the arrival state and
    geometric(q) in the loss state; chi-square test at the 1% level."""
    p, q = 0.3, 0.4
    traj = sample(GilbertElliott(p, q), 80_000, seed)
    out = []
    ok = True
    for label, data, rate in (("tau*", traj.tau_stars - 1, p), ("beta*", traj.beta_stars - 1, q)):
        data = np.asarray(data)
        n = data.size
        # bins 0..K-1 plus a tail bin, each with expected count >= 5
        k_max = 0
        while n * (1 - rate) ** (k_max + 1) >= 5 and n * rate * (1 - rate) ** (k_max + 1) >= 5:
            k_max += 1
        probs = [rate * (1 - rate) ** k for k in range(k_max)] + [(1 - rate) ** k_max]
        observed = [np.sum(data == k) for k in range(k_max)] + [np.sum(data >= k_max)]
        pval = stats.chisquare(observed, np.asarray(probs) * n).pvalue
        ok &= bool(n >= 10_000 and pval >= 0.01)
        out.append(f"{label} n={n} p-value={pval:.4f}")
    return PropertyResult("geometric_sojourns", ok, "; ".join(out))


def check_monotonicity(seed: int, instances: int = 100) -> PropertyResult:
    rng = make_rng(seed)
    worst = np.inf
    for _ in range(instances):
        s = random_system(rng, radius=(0.5, 1.6))
        y = random_psd(rng, s.n, scale=rng.uniform(0.1, 10.0))
        x = y + random_psd(rng, s.n, scale=rng.uniform(0.0, 10.0), rank=1)
        hx, hy, gx, gy = h_op(s, x), h_op(s, y), g_op(s, x), g_op(s, y)
        worst = min(
            worst,
            _rel_min_eig(hx - hy, hx),
            _rel_min_eig(gx - gy, gx),
            _rel_min_eig(hx - gx, hx),
        )
    return PropertyResult(
        "operator_monotonicity", worst >= -EIG_TOL, f"{instances} instances, worst scaled eigenvalue {worst:.3e}"
    )


def check_predictor_bound(seed: int, instances: int = 50) -> PropertyResult:
    rng = make_rng(seed)
    worst_gap = np.inf
    worst_eq = 0.0
    for _ in range(instances):
        s = random_system(rng, radius=(0.8, 1.5))
        stacks = build_stacks(s, upto=2)
        x = random_psd(rng, s.n, scale=rng.uniform(0.1, 10.0))
        for i in (1, 2):
            gi = g_iter(s, x, i)
            kopt = optimal_phi_gain(s, stacks, i, x)
            err = np.linalg.norm(phi_op(s, stacks, i, kopt, x) - gi, 2) / max(1.0, np.linalg.norm(gi, 2))
            worst_eq = max(worst_eq, err)
            for _ in range(20):
                k = kopt + rng.standard_normal(kopt.shape) * rng.uniform(0.01, 2.0)
                worst_gap = min(worst_gap, _rel_min_eig(phi_op(s, stacks, i, k, x) - gi, gi))
    ok = worst_gap >= -EIG_TOL and worst_eq <= 1e-9
    return PropertyResult(
        "predictor_bounds_riccati",
        ok,
        f"{instances} instances x horizons 1,2; min scaled eig(phi - g^i) {worst_gap:.3e}; "
        f"max error at optimal gain {worst_eq:.3e}",
    )


def check_dare(seed: int, instances: int = 20) -> PropertyResult:
    rng = make_rng(seed)
    systems = [bundled_system("example1"), bundled_system("example2")]
    systems += [random_system(rng) for _ in range(instances)]
    worst_res = 0.0
    worst_rad = 0.0
    for s in systems:
        pt, kt = dare_solve(s)
        worst_res = max(worst_res, np.linalg.norm(g_op(s, pt) - pt, 2) / np.linalg.norm(pt, 2))
        worst_rad = max(worst_rad, rho(s.a + kt @ s.c))
    ok = worst_res <= 1e-8 and worst_rad < 1.0
    return PropertyResult(
        "dare_fixed_point", ok, f"{len(systems)} systems; max relative residual {worst_res:.3e}; max rho(A+KC) {worst_rad:.4f}"
    )


def check_coupling(seed: int, trials: int = 100) -> PropertyResult:
    rep = monotonicity_test(bundled_system("example1"), 0.3, 0.1, 0.65, T=1000, N=trials, seed=seed)
    ok = rep.pathwise_ok and rep.ensemble_ok and rep.forbidden_visits == 0
    return PropertyResult(
        "coupling_pathwise_order",
        ok,
        f"{trials} coupled trials; worst scaled eigenvalue {rep.worst_violation:.3e}; "
        f"(1,0) visits {rep.forbidden_visits}; ensemble order {'ok' if rep.ensemble_ok else 'violated'}",
    )


def _certificate_instance(rng):
    while True:
        s = random_system(rng, radius=(1.0, 1.5))
        stacks = build_stacks(s)
        if not stacks.horizons:
            continue
        lam2 = rho(s.a) ** 2
        q = rng.uniform(max(0.05, 1.0 - 1.0 / lam2 + 0.05), 0.95)
        p = rng.uniform(0.05, 0.95)
        gains = GainSet(0.5 * rng.standard_normal((s.n, stacks.c_stack[i].shape[0])) for i in stacks.horizons)
        if not necessary_check(s, q)[0]:
            continue
        r = rho(build_h_of_k(s, stacks, gains, p, q))
        if abs(r - 1.0) > 0.05 and r < 3.0:
            return s, stacks, gains, p, q, r


def check_certificate(seed: int, instances: int = 10) -> PropertyResult:
    """Spectral test on H(K), decay of L_K iterates and the constructed
    certificate P = sum L_K^i(I) agree on random instances."""
    rng = make_rng(seed)
    fails = []
    n_stable = 0
    for idx in range(instances):
        s, stacks, gains, p, q, r = _certificate_instance(rng)
        lmat_r = rho(l_k_matrix(s, stacks, gains, p, q))
        if abs(lmat_r - r) > 1e-8 * max(1.0, r):
            fails.append(f"#{idx}: rho(L_K)={lmat_r:.10g} vs rho(H)={r:.10g}")
            continue
        x = np.eye(s.n)
        decayed = grew = False
        for _ in range(5000):
            x = apply_l_k(s, stacks, gains, x, p, q)
            nx = np.linalg.norm(x, 2)
            if nx < 1e-6:
                decayed = True
                break
            if nx > 1e6:
                grew = True
                break
        if r < 1.0:
            n_stable += 1
            if not decayed:
                fails.append(f"#{idx}: rho={r:.4f} but L_K iterates did not decay")
                continue
            total = np.eye(s.n)
            term = np.eye(s.n)
            for _ in range(100_000):
                term = apply_l_k(s, stacks, gains, term, p, q)
                total = total + term
                if np.linalg.norm(term, 2) < 1e-10 * np.linalg.norm(total, 2):
                    break
            margin = min_eig(total - apply_l_k(s, stacks, gains, total, p, q))
            if not (min_eig(total) > 0 and margin > 0):
                fails.append(f"#{idx}: certificate margin {margin:.3e}")
        elif not grew:
            fails.append(f"#{idx}: rho={r:.4f} but L_K iterates did not grow")
    detail = f"{instances} instances ({n_stable} with rho(H)<1)"
    if fails:
        detail += "; " + "; ".join(fails)
    return PropertyResult("gain_certificate_equivalence", not fails, detail)


def check_vec_kron(seed: int, instances: int = 100) -> PropertyResult:
    rng = make_rng(seed)
    worst_vec = 0.0
    worst_rad = 0.0
    for _ in range(instances):
        r, c, k = (int(v) for v in rng.integers(1, 5, size=3))
        a = rng.standard_normal((r, c))
        x = rng.standard_normal((c, k))
        b = rng.standard_normal((k, int(rng.integers(1, 5))))
        lhs = vec(a @ x @ b)
        rhs = kron(b.T, a) @ vec(x)
        worst_vec = max(worst_vec, np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(lhs))))
        if not np.array_equal(unvec(vec(x), c, k), x):
            worst_vec = np.inf
        sq = rng.standard_normal((r, r))
        ra = rho(sq)
        worst_rad = max(worst_rad, abs(rho(kron(sq, sq)) - ra * ra) / max(1.0, ra * ra))
    ok = worst_vec <= 1e-12 and worst_rad <= 1e-9
    return PropertyResult(
        "vec_kron_identities", ok, f"{instances} triples; vec identity error {worst_vec:.3e}; rho(A⊗A) error {worst_rad:.3e}"
    )


PROPERTIES: dict[str, Callable[[int], PropertyResult]] = {
    "geometric_sojourns": check_sojourns,
    "operator_monotonicity": check_monotonicity,
    "predictor_bounds_riccati": check_predictor_bound,
    "dare_fixed_point": check_dare,
    "coupling_pathwise_order": check_coupling,
    "gain_certificate_equivalence": check_certificate,
    "vec_kron_identities": check_vec_kron,
}


def run_suite(seed: int = 1) -> list[PropertyResult]:
    results = []
    for offset, fn in enumerate(PROPERTIES.values()):
        t0 = time.perf_counter()
        try:
            res = fn(seed * 1000 + offset)
        except Exception as exc:  # a crash is a failed property, not a crashed suite
            res = PropertyResult(fn.__name__, False, f"raised {type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
