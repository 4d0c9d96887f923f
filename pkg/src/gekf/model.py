"""Linear time-invariant plant description, assumption checks and the
stacked multi-step matrices used by the multi-step gain bounds.

Only the unstable part of a plant should be passed in. Stable modes have
bounded open-loop prediction error and do not affect any stability
verdict; decoupling them (by a similarity transform) is left to the caller.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.linalg import block_diag

from .errors import AssumptionWarning, ModelError
from .numerics import psd_sqrt, rho

__all__ = [
    "LtiSystem",
    "ModelDiagnostics",
    "StackedMatrices",
    "validate",
    "observability_index",
    "build_stacks",
    "numerical_rank",
    "has_defective_unit_eigenvalue",
    "load_system",
    "parse_system",
    "system_to_dict",
    "bundled_system",
]

RANK_RTOL = 1e-10
PSD_TOL = 1e-10


def numerical_rank(m: np.ndarray, rtol: float = RANK_RTOL) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _check_psd(name: str, x: np.ndarray, strict: bool = False) -> None:
    if not np.allclose(x, x.T, rtol=1e-10, atol=1e-12):
        raise ModelError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (x + x.T))
    scale = max(1.0, float(np.max(np.abs(w))))
    if strict and w[0] <= PSD_TOL * scale:
        raise ModelError(f"{name} must be positive definite (smallest eigenvalue {w[0]:.3g})")
    if w[0] < -PSD_TOL * scale:
        raise ModelError(f"{name} must be positive semidefinite (smallest eigenvalue {w[0]:.3g})")


@dataclass(frozen=True)
class LtiSystem:
    """Plant ``x+ = A x + w``, ``y = C x + v`` with noise covariances Q, R
    and initial covariance Sigma0.

    Arrays are copied and made read-only on construction.
    """

    a: np.ndarray
    c: np.ndarray
    q_cov: np.ndarray
    r_cov: np.ndarray
    sigma0: np.ndarray = field(default=None)

    def __post_init__(self):
        a = np.array(self.a, dtype=float, ndmin=2)
        c = np.array(self.c, dtype=float, ndmin=2)
        q = np.array(self.q_cov, dtype=float, ndmin=2)
        r = np.array(self.r_cov, dtype=float, ndmin=2)
        n = a.shape[0]
        s0 = np.eye(n) if self.sigma0 is None else np.array(self.sigma0, dtype=float, ndmin=2)
        for name, arr in (("A", a), ("C", c), ("Q", q), ("R", r), ("Sigma0", s0)):
            if arr.ndim != 2:
                raise ModelError(f"{name} must be a matrix, got {arr.ndim} dimensions")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name} has non-finite entries")
        if a.shape != (n, n) or n == 0:
            raise ModelError(f"A must be square and non-empty, got {a.shape}")
        m = c.shape[0]
        if c.shape[1] != n or m == 0:
            raise ModelError(f"C must be m x {n}, got {c.shape}")
        if q.shape != (n, n):
            raise ModelError(f"Q must be {n} x {n}, got {q.shape}")
        if r.shape != (m, m):
            raise ModelError(f"R must be {m} x {m}, got {r.shape}")
        if s0.shape != (n, n):
            raise ModelError(f"Sigma0 must be {n} x {n}, got {s0.shape}")
        _check_psd("Q", q)
        _check_psd("R", r, strict=True)
        _check_psd("Sigma0", s0)
        for name, arr in (("a", a), ("c", c), ("q_cov", q), ("r_cov", r), ("sigma0", s0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.c.shape[0]

    def with_sigma0(self, sigma0) -> "LtiSystem":
        return LtiSystem(self.a, self.c, self.q_cov, self.r_cov, sigma0)


@dataclass(frozen=True)
class ModelDiagnostics:
    observable: bool
    controllable: bool
    a1_satisfied: bool
    spectral_radius_a: float
    observability_index: int | None


def _observability_stack(a: np.ndarray, c: np.ndarray, blocks: int) -> np.ndarray:
    rows = []
    ak = np.eye(a.shape[0])
    for _ in range(blocks):
        rows.append(c @ ak)
        ak = ak @ a
    return np.vstack(rows)


def observability_index(sys: LtiSystem) -> int:
    """Smallest ``i`` such that ``[C; CA; ...; CA^(i-1)]`` has rank ``n``.

    Raises ``ModelError`` when ``(C, A)`` is not observable.
    """
    n = sys.n
    for i in range(1, n + 1):
        if numerical_rank(_observability_stack(sys.a, sys.c, i)) == n:
            return i
    raise ModelError("(C, A) is not observable")


def validate(sys: LtiSystem) -> ModelDiagnostics:
    """Rank tests for observability and controllability of ``(A, Q^1/2)``,
    plus the check that no eigenvalue of A lies strictly inside the unit disk.

    A violated eigenvalue assumption emits :class:`AssumptionWarning`.
    """
    _check_psd("R", np.asarray(sys.r_cov), strict=True)
    n = sys.n
    try:
        index = observability_index(sys)
        observable = True
    except ModelError:
        index = None
        observable = False
    b = psd_sqrt(sys.q_cov)
    cols = []
    ak = np.eye(n)
    for _ in range(n):
        cols.append(ak @ b)
        ak = ak @ sys.a
    controllable = numerical_rank(np.hstack(cols)) == n
    eig = np.abs(np.linalg.eigvals(sys.a))
    a1 = bool(np.all(eig >= 1.0 - 1e-12))
    if not a1:
        warnings.warn(
            f"A has eigenvalues inside the unit circle (min |lambda| = {eig.min():.4g}); "
            "stable modes only make the sufficient conditions more conservative",
            AssumptionWarning,
            stacklevel=2,
        )
    return ModelDiagnostics(
        observable=observable,
        controllable=controllable,
        a1_satisfied=a1,
        spectral_radius_a=rho(sys.a),
        observability_index=index,
    )


@dataclass(frozen=True)
class StackedMatrices:
    """Multi-step matrices keyed by the horizon ``i`` (1-based)."""

    c_stack: dict[int, np.ndarray]
    a_stack: dict[int, np.ndarray]
    d_stack: dict[int, np.ndarray]
    q_stack: dict[int, np.ndarray]
    r_stack: dict[int, np.ndarray]
    j_mat: dict[int, np.ndarray]
    a_pow: dict[int, np.ndarray]
    obs_index: int

    @property
    def horizons(self) -> list[int]:
        return sorted(self.c_stack)


def build_stacks(sys: LtiSystem, upto: int | None = None) -> StackedMatrices:
    """Assemble ``C^(i)``, ``A^(i)``, ``D^(i)``, ``Q^(i)``, ``R^(i)``, ``J_i``.

    By default horizons ``1 .. I_o - 1`` are built (none when the plant is
    one-step observable); ``upto`` overrides the largest horizon.
    """
    a, c, q, r = sys.a, sys.c, sys.q_cov, sys.r_cov
    n, m = sys.n, sys.m
    io = observability_index(sys)
    top = io - 1 if upto is None else int(upto)
    pows = [np.eye(n)]
    for _ in range(max(top, 1)):
        pows.append(pows[-1] @ a)
    cs, as_, ds, qs, rs, js, ap = {}, {}, {}, {}, {}, {}, {}
    for i in range(1, top + 1):
        cs[i] = np.vstack([c @ pows[j] for j in range(i)])
        as_[i] = np.hstack([pows[i - 1 - j] for j in range(i)])
        d = np.zeros((i * m, i * n))
        for row in range(1, i):
            for col in range(row):
                d[row * m:(row + 1) * m, col * n:(col + 1) * n] = c @ pows[row - 1 - col]
        ds[i] = d
        qs[i] = block_diag(*([q] * i))
        rs[i] = block_diag(*([r] * i))
        qd = qs[i] @ d.T
        js[i] = np.block([[qs[i], qd], [qd.T, d @ qs[i] @ d.T + rs[i]]])
        ap[i] = pows[i]
    return StackedMatrices(cs, as_, ds, qs, rs, js, ap, io)


def has_defective_unit_eigenvalue(a: np.ndarray, tol: float = 1e-8) -> bool:
    """True when some eigenvalue on the unit circle has a nontrivial Jordan block.

    Algebraic multiplicity is the size of the eigenvalue cluster within
    ``sqrt(tol)`` (repeated roots split at that scale); geometric multiplicity
    is the nullity of ``A - lambda I`` at relative tolerance ``tol``.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    eig = np.linalg.eigvals(a)
    cluster_tol = np.sqrt(tol)
    seen: list[complex] = []
    for lam in eig:
        if abs(abs(lam) - 1.0) > cluster_tol:
            continue
        if any(abs(lam - s) <= cluster_tol for s in seen):
            continue
        members = eig[np.abs(eig - lam) <= cluster_tol]
        center = members.mean()
        seen.append(center)
        algebraic = members.size
        geometric = n - numerical_rank(a - center * np.eye(n), rtol=tol)
        if geometric < algebraic:
            return True
    return False


# -- JSON system files -------------------------------------------------------

_KEYS = ("A", "C", "Q", "R", "Sigma0")


def _parse_matrix(key: str, value) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise ModelError(f"{key}: expected a non-empty array of rows")
    width = None
    out = []
    for i, row in enumerate(value, start=1):
        if not isinstance(row, list):
            raise ModelError(f"{key}: row {i}: expected an array of numbers, got {type(row).__name__}")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ModelError(f"{key}: row {i}: has {len(row)} columns, expected {width}")
        vals = []
        for j, entry in enumerate(row, start=1):
            if isinstance(entry, bool) or not isinstance(entry, (int, float)):
                raise ModelError(f"{key}: row {i}, column {j}: expected a number, got {entry!r}")
            vals.append(float(entry))
        out.append(vals)
    if not width:
        raise ModelError(f"{key}: rows must not be empty")
    return np.array(out, dtype=float)


def parse_system(data: dict) -> LtiSystem:
    """Build a system from the decoded JSON object.

    Keys ``A``, ``C``, ``Q``, ``R`` are required, ``Sigma0`` defaults to the
    identity. Each is a row-major array of arrays of numbers.
    """
    if not isinstance(data, dict):
        raise ModelError("system file must contain a JSON object")
    unknown = sorted(set(data) - set(_KEYS))
    if unknown:
        raise ModelError(f"unknown keys in system file: {', '.join(unknown)}")
    missing = [k for k in _KEYS[:4] if k not in data]
    if missing:
        raise ModelError(f"missing keys in system file: {', '.join(missing)}")
    mats = {k: _parse_matrix(k, data[k]) for k in _KEYS if k in data}
    return LtiSystem(mats["A"], mats["C"], mats["Q"], mats["R"], mats.get("Sigma0"))


def bundled_system(name: str) -> LtiSystem:
    """Load one of the packaged example plants (``example1`` or ``example2``)."""
    stem = Path(name).stem
    text = resources.files("gekf").joinpath("data").joinpath(f"{stem}.json").read_text(encoding="utf-8")
    return parse_system(json.loads(text))


def load_system(path: str | Path) -> LtiSystem:
    """Read a system JSON file.

    A path that does not exist but names a packaged example
    (``example1.json``, ``example2.json``) falls back to the bundled copy.
    """
    path = Path(path)
    if not path.exists():
        if path.stem in ("example1", "example2") and path.parent == Path("."):
            return bundled_system(path.stem)
        raise FileNotFoundError(f"system file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return parse_system(data)
    except ModelError as exc:
        raise ModelError(f"{path}: {exc}") from exc


def system_to_dict(sys: LtiSystem) -> dict:
    return {
        "A": sys.a.tolist(),
        "C": sys.c.tolist(),
        "Q": sys.q_cov.tolist(),
        "R": sys.r_cov.tolist(),
        "Sigma0": sys.sigma0.tolist(),
    }
