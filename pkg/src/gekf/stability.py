"""Sufficient conditions for bounded peak and mean-square covariance.

The central object is the n^2 x n^2 matrix

    H(K) = q p [(A⊗A)^-1 - (1-q) I]^-1  sum_i (A^i + K^(i) C^(i)) ⊗ (A^i + K^(i) C^(i)) (1-p)^(i-1)

summed over horizons ``i = 1 .. I_o - 1``. A gain ``K`` with
``rho(H(K)) < 1`` certifies peak-covariance stability, and the supremum
of failure rates admitting such a gain lower-bounds the critical failure
rate for mean-square stability. Gains are searched over real matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .channel import make_rng
from .errors import PreconditionError
from .model import LtiSystem, StackedMatrices, build_stacks, has_defective_unit_eigenvalue, validate
from .numerics import dare_solve, lyapunov_solve, rho

__all__ = [
    "GainSet",
    "GainSearch",
    "BoundSearch",
    "StabilityReport",
    "FEASIBILITY_MARGIN",
    "necessary_check",
    "prop1_terms",
    "prop1_check",
    "prop1_max_p",
    "h0_radius_closed_form",
    "build_h_of_k",
    "apply_l_k",
    "l_k_matrix",
    "riccati_gain_set",
    "find_gain",
    "bound_search",
    "p_lower_bound",
    "full_report",
]

FEASIBILITY_MARGIN = 1e-9
DEFAULT_RESTARTS = 8
DEFAULT_MAXFEV = 2000


class GainSet(list):
    """List of gains ``[K^(1), ..., K^(I_o - 1)]``, ``K^(i)`` of shape n x (i m)."""

    @classmethod
    def zeros(cls, stacks: StackedMatrices, n: int) -> "GainSet":
        return cls(np.zeros((n, stacks.c_stack[i].shape[0])) for i in stacks.horizons)

    @classmethod
    def from_flat(cls, flat: np.ndarray, stacks: StackedMatrices, n: int) -> "GainSet":
        out, pos = cls(), 0
        for i in stacks.horizons:
            cols = stacks.c_stack[i].shape[0]
            out.append(np.asarray(flat[pos:pos + n * cols]).reshape(n, cols))
            pos += n * cols
        return out

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([np.asarray(k).reshape(-1) for k in self])

    def tolist(self) -> list:
        return [np.asarray(k).tolist() for k in self]


def _check_gains(k: GainSet | list, stacks: StackedMatrices, n: int) -> list[np.ndarray]:
    hs = stacks.horizons
    if len(k) != len(hs):
        raise ValueError(f"expected {len(hs)} gains, got {len(k)}")
    out = []
    for i, ki in zip(hs, k):
        ki = np.asarray(ki, dtype=float)
        want = (n, stacks.c_stack[i].shape[0])
        if ki.shape != want:
            raise ValueError(f"K^({i}) must have shape {want}, got {ki.shape}")
        out.append(ki)
    return out


# -- closed-form conditions ---------------------------------------------------


def necessary_check(sys: LtiSystem, q: float) -> tuple[bool, float]:
    """``rho(A)^2 (1 - q) < 1``; returns ``(ok, value)``."""
    value = rho(sys.a) ** 2 * (1.0 - q)
    return value < 1.0, float(value)


def prop1_terms(lam2: float, io: int, p: float, q: float) -> tuple[float, float]:
    """Both sides of the K = 0 condition for ``lam2 = rho(A)^2``."""
    tail = sum(lam2 ** i * (1.0 - p) ** (i - 1) for i in range(1, io))
    lhs = p * q * lam2 * tail
    rhs = 1.0 - lam2 * (1.0 - q)
    return lhs, rhs


def prop1_check(sys: LtiSystem, p: float, q: float, io: int | None = None) -> tuple[bool, float, float]:
    """Evaluate the zero-gain condition; returns ``(ok, lhs, rhs)``."""
    io = build_stacks(sys).obs_index if io is None else io
    lhs, rhs = prop1_terms(rho(sys.a) ** 2, io, p, q)
    return lhs < rhs, lhs, rhs


def prop1_max_p(sys: LtiSystem, q: float, tol: float = 1e-6, io: int | None = None) -> float:
    """Upper end of the interval ``(0, p*)`` on which the zero-gain condition holds.

    The left side is not monotone in p once ``I_o >= 3``, so the first
    crossing is located on a grid and then refined by bisection. Returns 0
    when the necessary condition fails and 1 when no crossing exists.
    """
    io = build_stacks(sys).obs_index if io is None else io
    lam2 = rho(sys.a) ** 2

    def margin(p: float) -> float:
        lhs, rhs = prop1_terms(lam2, io, p, q)
        return rhs - lhs

    if margin(0.0) <= 0.0:
        return 0.0
    grid = np.linspace(0.0, 1.0, 1001)
    lo = 0.0
    for p in grid[1:]:
        if margin(p) <= 0.0:
            hi = float(p)
            break
        lo = float(p)
    else:
        return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if margin(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


def h0_radius_closed_form(sys: LtiSystem, p: float, q: float, io: int | None = None) -> float:
    """Spectral radius of ``H(0)`` from the scalar series identity."""
    io = build_stacks(sys).obs_index if io is None else io
    lam2 = rho(sys.a) ** 2
    head = q * lam2 / (1.0 - lam2 * (1.0 - q))
    return head * sum(lam2 ** j * (1.0 - p) ** (j - 1) * p for j in range(1, io))


# -- H(K) and the L_K operator -----------------------------------------------


def _loss_series(a: np.ndarray, q: float) -> np.ndarray:
    """``q [(A⊗A)^-1 - (1-q) I]^-1`` written without inverting A⊗A."""
    n2 = a.shape[0] ** 2
    aa = np.kron(a, a)
    m = np.eye(n2) - (1.0 - q) * aa
    try:
        return q * np.linalg.solve(m, aa)
    except np.linalg.LinAlgError as exc:
        raise PreconditionError(f"(A⊗A)^-1 - (1-q)I is singular: {exc}") from exc


def _require_necessary(sys: LtiSystem, q: float) -> None:
    ok, value = necessary_check(sys, q)
    if not ok:
        raise PreconditionError(f"rho(A)^2 (1 - q) = {value:.6g} >= 1")


def build_h_of_k(sys: LtiSystem, stacks: StackedMatrices, k, p: float, q: float) -> np.ndarray:
    _require_necessary(sys, q)
    n = sys.n
    gains = _check_gains(k, stacks, n)
    if not gains:
        return np.zeros((n * n, n * n))
    acc = np.zeros((n * n, n * n))
    for i, ki in zip(stacks.horizons, gains):
        mi = stacks.a_pow[i] + ki @ stacks.c_stack[i]
        acc += (1.0 - p) ** (i - 1) * np.kron(mi, mi)
    return p * _loss_series(sys.a, q) @ acc


def apply_l_k(sys: LtiSystem, stacks: StackedMatrices, k, x: np.ndarray, p: float, q: float) -> np.ndarray:
    """``p sum_i (1-p)^(i-1) M_i' Phi_X M_i`` with ``M_i = A^i + K^(i) C^(i)``
    and ``Phi_X`` the solution of ``Phi = (1-q) A' Phi A + q A' X A``."""
    _require_necessary(sys, q)
    gains = _check_gains(k, stacks, sys.n)
    x = np.asarray(x, dtype=float)
    if not gains:
        return np.zeros_like(x)
    phi = lyapunov_solve(sys.a, q, x)
    out = np.zeros_like(x)
    for i, ki in zip(stacks.horizons, gains):
        mi = stacks.a_pow[i] + ki @ stacks.c_stack[i]
        out += (1.0 - p) ** (i - 1) * (mi.T @ phi @ mi)
    return 0.5 * p * (out + out.T)


def l_k_matrix(sys: LtiSystem, stacks: StackedMatrices, k, p: float, q: float) -> np.ndarray:
    """Matrix of ``vec(X) -> vec(L_K(X))``, assembled column by column."""
    n = sys.n
    cols = []
    for idx in range(n * n):
        e = np.zeros(n * n)
        e[idx] = 1.0
        x = e.reshape(n, n, order="F")
        # L_K is linear on all matrices; apply it without symmetrizing
        phi_cols = _apply_l_k_raw(sys, stacks, k, x, p, q)
        cols.append(phi_cols.reshape(-1, order="F"))
    return np.column_stack(cols)


def _apply_l_k_raw(sys, stacks, k, x, p, q):
    gains = _check_gains(k, stacks, sys.n)
    a = sys.a
    n = a.shape[0]
    lhs = np.eye(n * n) - (1.0 - q) * np.kron(a.T, a.T)
    phi = np.linalg.solve(lhs, (q * (a.T @ x @ a)).reshape(-1, order="F")).reshape(n, n, order="F")
    out = np.zeros_like(x)
    for i, ki in zip(stacks.horizons, gains):
        mi = stacks.a_pow[i] + ki @ stacks.c_stack[i]
        out += (1.0 - p) ** (i - 1) * (mi.T @ phi @ mi)
    return p * out


# -- gain search --------------------------------------------------------------


def riccati_gain_set(sys: LtiSystem, stacks: StackedMatrices) -> GainSet:
    """Gains reproducing powers of the steady-state closed loop.

    With ``F = A + K~ C`` the identity ``F^i = A^i + sum_j F^(i-1-j) K~ C A^j``
    gives ``K^(i) = [F^(i-1) K~, ..., F K~, K~]``.
    """
    if not stacks.horizons:
        return GainSet()
    _, kt = dare_solve(sys)
    f = sys.a + kt @ sys.c
    out = GainSet()
    for i in stacks.horizons:
        blocks = [np.linalg.matrix_power(f, i - 1 - j) @ kt for j in range(i)]
        out.append(np.hstack(blocks))
    return out


@dataclass
class GainSearch:
    gains: GainSet
    radius: float
    success: bool
    evaluations: int
    starts: int
    improved: bool
    radius_at_zero: float


class _Reached(Exception):
    pass


def find_gain(
    sys: LtiSystem,
    stacks: StackedMatrices,
    p: float,
    q: float,
    budget: int = DEFAULT_MAXFEV,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    stop_below: float | None = None,
) -> GainSearch:
    """Minimize ``rho(H(K))`` over real gains by multi-start Nelder-Mead.

    Starts, in order: zero gain, the stacked steady-state Kalman gain, then
    random gains with alternating sign scaled like the Kalman gain. Each
    start gets ``budget`` function evaluations. With ``stop_below`` the
    search returns as soon as a radius under that value is seen.

    ``success`` is ``radius < 1 - FEASIBILITY_MARGIN``; ``improved`` is
    false when no start beat the zero gain.
    """
    _require_necessary(sys, q)
    n = sys.n
    zero = GainSet.zeros(stacks, n)
    r0 = float(rho(build_h_of_k(sys, stacks, zero, p, q)))
    if not stacks.horizons:
        return GainSearch(zero, r0, True, 1, 0, False, r0)

    series = p * _loss_series(sys.a, q)
    hs = stacks.horizons
    cstk = [stacks.c_stack[i] for i in hs]
    apow = [stacks.a_pow[i] for i in hs]
    weights = [(1.0 - p) ** (i - 1) for i in hs]
    best = {"x": zero.flat(), "f": r0}
    count = [1]

    def objective(flat: np.ndarray) -> float:
        count[0] += 1
        acc = 0.0
        for ki, ci, ai, w in zip(GainSet.from_flat(flat, stacks, n), cstk, apow, weights):
            mi = ai + ki @ ci
            acc = acc + w * np.kron(mi, mi)
        val = rho(series @ acc)
        if val < best["f"]:
            best["f"], best["x"] = val, np.array(flat)
            if stop_below is not None and val < stop_below:
                raise _Reached
        return val

    if stop_below is not None and r0 < stop_below:
        return GainSearch(zero, r0, r0 < 1.0 - FEASIBILITY_MARGIN, 1, 0, False, r0)

    kal = riccati_gain_set(sys, stacks).flat()
    scale = max(1.0, float(np.linalg.norm(kal)) / np.sqrt(kal.size))
    rng = make_rng(seed)
    starts = [zero.flat(), kal]
    for s in range(max(restarts - 2, 0)):
        sign = 1.0 if s % 2 == 0 else -1.0
        starts.append(sign * scale * rng.standard_normal(kal.size))
    starts = starts[:max(restarts, 1)]
    used = 0
    try:
        for x0 in starts:
            used += 1
            minimize(
                objective,
                x0,
                method="Nelder-Mead",
                options={"maxfev": budget, "xatol": 1e-10, "fatol": 1e-12, "adaptive": kal.size > 4},
            )
    except _Reached:
        pass
    gains = GainSet.from_flat(best["x"], stacks, n)
    radius = float(best["f"])
    return GainSearch(
        gains=gains,
        radius=radius,
        success=radius < 1.0 - FEASIBILITY_MARGIN,
        evaluations=count[0],
        starts=used,
        improved=radius < r0,
        radius_at_zero=r0,
    )


# -- critical failure rate bound ----------------------------------------------


@dataclass
class BoundSearch:
    value: float
    tol: float
    evaluations: list[tuple[float, bool, float]] = field(default_factory=list)
    monotone: bool = True
    notes: list[str] = field(default_factory=list)


P_FLOOR = 1e-6
P_CEIL = 1.0 - 1e-9


def bound_search(
    sys: LtiSystem,
    stacks: StackedMatrices,
    q: float,
    tol: float = 1e-3,
    seed: int = 0,
    budget: int = DEFAULT_MAXFEV,
    restarts: int = DEFAULT_RESTARTS,
) -> BoundSearch:
    """Bisect on p for the largest failure rate whose gain search succeeds.

    Both bracket ends are tested first. Every probe is recorded, and a
    feasible probe lying above an infeasible one is reported as a
    non-monotone bracket instead of being silently ignored.
    """
    _require_necessary(sys, q)
    out = BoundSearch(value=float("nan"), tol=tol)
    if not stacks.horizons:
        out.value = 1.0
        out.evaluations.append((P_CEIL, True, 0.0))
        return out

    def feasible(p: float) -> bool:
        res = find_gain(sys, stacks, p, q, budget=budget, restarts=restarts, seed=seed,
                        stop_below=1.0 - FEASIBILITY_MARGIN)
        out.evaluations.append((p, res.success, res.radius))
        return res.success

    if feasible(P_CEIL):
        out.value = 1.0
        return out
    if not feasible(P_FLOOR):
        raise PreconditionError(
            f"no stabilizing gain found even at p = {P_FLOOR}; this contradicts the theory "
            "and points to numerical trouble"
        )
    lo, hi = P_FLOOR, P_CEIL
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    out.value = lo
    infeasible = [p for p, ok, _ in out.evaluations if not ok]
    feas = [p for p, ok, _ in out.evaluations if ok]
    if infeasible and feas and max(feas) > min(infeasible):
        out.monotone = False
        out.notes.append(
            f"non-monotone bracket: feasible at p={max(feas):.6g} but infeasible at p={min(infeasible):.6g}"
        )
    return out


def p_lower_bound(sys: LtiSystem, stacks: StackedMatrices, q: float, tol: float = 1e-3, seed: int = 0) -> float:
    return bound_search(sys, stacks, q, tol=tol, seed=seed).value


# -- aggregate report ---------------------------------------------------------


@dataclass
class StabilityReport:
    p: float
    q: float
    observability_index: int
    spectral_radius_a: float
    necessary_ok: bool
    necessary_value: float
    prop1_ok: bool
    prop1_lhs: float
    prop1_rhs: float
    prop1_max_p: float
    theorem1_ok: bool
    best_gain: GainSet
    best_radius: float
    radius_at_zero_gain: float
    p_lower_bound: float | None
    mss_claimed: bool
    notes: list[str] = field(default_factory=list)

    @property
    def verdict_available(self) -> bool:
        return self.theorem1_ok or self.prop1_ok

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "observability_index": self.observability_index,
            "spectral_radius_a": self.spectral_radius_a,
            "necessary_ok": self.necessary_ok,
            "necessary_value": self.necessary_value,
            "prop1_ok": self.prop1_ok,
            "prop1_lhs": self.prop1_lhs,
            "prop1_rhs": self.prop1_rhs,
            "prop1_max_p": self.prop1_max_p,
            "theorem1_ok": self.theorem1_ok,
            "best_gain": self.best_gain.tolist(),
            "best_radius": self.best_radius,
            "radius_at_zero_gain": self.radius_at_zero_gain,
            "p_lower_bound": self.p_lower_bound,
            "mss_claimed": self.mss_claimed,
            "notes": list(self.notes),
        }


def full_report(
    sys: LtiSystem,
    p: float,
    q: float,
    *,
    seed: int = 0,
    with_bound: bool = True,
    tol: float = 1e-3,
) -> StabilityReport:
    """Run every check at ``(p, q)``.

    Mean-square stability is claimed when ``p`` lies below the computed
    lower bound on the critical failure rate, or when peak-covariance
    stability holds and A has no defective unit-circle eigenvalue.
    """
    import warnings

    from .errors import AssumptionWarning

    notes: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", AssumptionWarning)
        diag = validate(sys)
    notes.extend(str(w.message) for w in caught)
    if not diag.observable:
        raise PreconditionError("(C, A) is not observable")
    if not diag.controllable:
        notes.append("(A, Q^1/2) is not controllable; the arrival-step bounds may not hold")
    defective = has_defective_unit_eigenvalue(sys.a)
    if defective:
        notes.append(
            "A has a defective eigenvalue on the unit circle: peak-covariance stability "
            "does not by itself imply mean-square stability"
        )
    stacks = build_stacks(sys)
    io = stacks.obs_index
    nec_ok, nec_val = necessary_check(sys, q)
    p1_ok, lhs, rhs = prop1_check(sys, p, q, io=io)
    p1_ok = p1_ok and nec_ok
    max_p = prop1_max_p(sys, q, io=io)
    if nec_ok:
        search = find_gain(sys, stacks, p, q, seed=seed)
        gains, radius, r0, t1 = search.gains, search.radius, search.radius_at_zero, search.success
        if not search.improved and not search.success:
            notes.append("gain search did not improve on the zero gain")
        bound = bound_search(sys, stacks, q, tol=tol, seed=seed) if with_bound else None
        p_low = bound.value if bound is not None else None
        if bound is not None:
            notes.extend(bound.notes)
    else:
        notes.append("necessary condition rho(A)^2 (1 - q) < 1 fails: filter is not mean-square stable")
        gains, radius, r0, t1, p_low = GainSet.zeros(stacks, sys.n), float("inf"), float("inf"), False, None
    mss = bool(nec_ok and ((p_low is not None and p < p_low) or (t1 and not defective)))
    return StabilityReport(
        p=p,
        q=q,
        observability_index=io,
        spectral_radius_a=diag.spectral_radius_a,
        necessary_ok=nec_ok,
        necessary_value=nec_val,
        prop1_ok=p1_ok,
        prop1_lhs=lhs,
        prop1_rhs=rhs,
        prop1_max_p=max_p,
        theorem1_ok=t1,
        best_gain=gains,
        best_radius=radius,
        radius_at_zero_gain=r0,
        p_lower_bound=p_low,
        mss_claimed=mss,
        notes=notes,
    )
