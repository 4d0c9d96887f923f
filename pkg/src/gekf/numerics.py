"""Dense real-matrix primitives: Kronecker/vec algebra, spectral radius,
Lyapunov and Riccati solvers, PSD square roots.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. Every
function here is pure; inputs are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, PreconditionError

__all__ = [
    "SpectralResult",
    "kron",
    "vec",
    "unvec",
    "spectral_radius",
    "rho",
    "lyapunov_solve",
    "riccati_map",
    "dare_solve",
    "psd_sqrt",
    "symmetrize",
    "min_eig",
    "power_norm_bound",
]

#: relative accuracy promised for spectral radii
SPECTRAL_RTOL = 1e-9


@dataclass(frozen=True)
class SpectralResult:
    radius: float
    dominant_eigenvalue_modulus_tolerance: float = SPECTRAL_RTOL


def _as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2 or 0 in arr.shape:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _as_square(x, name: str = "matrix") -> np.ndarray:
    arr = _as_matrix(x, name)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    return arr


def symmetrize(x: np.ndarray) -> np.ndarray:
    """Average with the transpose; works on stacks of matrices too."""
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def kron(a, b) -> np.ndarray:
    return np.kron(_as_matrix(a, "a"), _as_matrix(b, "b"))


def vec(x) -> np.ndarray:
    """Stack the columns of ``x`` into one vector: vec([[1,2],[3,4]]) = (1,3,2,4)."""
    return _as_matrix(x, "x").reshape(-1, order="F")


def unvec(v, rows: int, cols: int) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 2 and arr.shape[1] != 1:
        raise ValueError(f"unvec expects a single column, got shape {arr.shape}")
    arr = arr.reshape(-1)
    if arr.size != rows * cols:
        raise ValueError(f"cannot unvec {arr.size} entries into a {rows}x{cols} matrix")
    return arr.reshape(rows, cols, order="F")


def rho(x: np.ndarray) -> float:
    """Spectral radius without input validation, for hot loops."""
    return float(np.max(np.abs(np.linalg.eigvals(x))))


def spectral_radius(x) -> SpectralResult:
    """Largest eigenvalue modulus of a general real square matrix.

    Uses LAPACK's Hessenberg reduction followed by shifted QR (``geev``).

    Raises
    ------
    ValueError
        If ``x`` is not square or has non-finite entries.
    ConvergenceError
        If the QR iteration fails to converge.
    """
    arr = _as_square(x, "x")
    try:
        eig = np.linalg.eigvals(arr)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"eigenvalue iteration did not converge: {exc}") from exc
    return SpectralResult(radius=float(np.max(np.abs(eig))))


def min_eig(x: np.ndarray) -> float:
    """Smallest eigenvalue of the symmetric part of ``x``."""
    return float(np.linalg.eigvalsh(symmetrize(np.asarray(x, dtype=float)))[0])


def lyapunov_solve(a, q_weight: float, x) -> np.ndarray:
    """Solve ``Phi = (1 - q) A' Phi A + q A' X A`` for ``Phi``.

    The equation is rewritten on vec-space as
    ``(I - (1 - q) A'⊗A') vec(Phi) = q vec(A' X A)`` and solved directly,
    which is exact and cheap for the small state dimensions used here.

    Parameters
    ----------
    a : (n, n) array_like
    q_weight : float
        Recovery rate, strictly inside (0, 1).
    x : (n, n) array_like
        PSD right-hand side.

    Raises
    ------
    PreconditionError
        If ``(1 - q) * rho(A)**2 >= 1`` so the series defining ``Phi`` diverges.
    ConvergenceError
        If the linear system is numerically singular.
    """
    a = _as_square(a, "a")
    x = _as_square(x, "x")
    if x.shape != a.shape:
        raise ValueError(f"x has shape {x.shape}, expected {a.shape}")
    if not 0.0 < q_weight < 1.0:
        raise PreconditionError(f"q_weight must lie in (0, 1), got {q_weight}")
    contraction = (1.0 - q_weight) * rho(a) ** 2
    if contraction >= 1.0:
        raise PreconditionError(
            f"(1 - q) * rho(A)^2 = {contraction:.6g} >= 1: Lyapunov series diverges"
        )
    n = a.shape[0]
    lhs = np.eye(n * n) - (1.0 - q_weight) * np.kron(a.T, a.T)
    rhs = q_weight * (a.T @ x @ a)
    try:
        phi = unvec(np.linalg.solve(lhs, vec(rhs)), n, n)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceError(f"singular Lyapunov system: {exc}") from exc
    phi = symmetrize(phi)
    resid = np.linalg.norm(phi - (1.0 - q_weight) * a.T @ phi @ a - rhs, 2)
    scale = max(np.linalg.norm(phi, 2), np.finfo(float).tiny)
    if resid > 1e-9 * scale and resid > 1e-300:
        raise ConvergenceError(
            f"Lyapunov residual {resid:.3g} exceeds 1e-9 * ||Phi||", residual=float(resid)
        )
    return phi


def riccati_map(a: np.ndarray, c: np.ndarray, q: np.ndarray, r: np.ndarray, x: np.ndarray) -> np.ndarray:
    """One arrival update ``AXA' + Q - AXC'(CXC' + R)^-1 CXA'``.

    ``x`` may be a single (n, n) matrix or a stack of shape (N, n, n).
    """
    axa = a @ x @ a.T
    cx = c @ x
    innov = cx @ c.T + r
    gain_rhs = cx @ a.T
    correction = np.swapaxes(gain_rhs, -1, -2) @ np.linalg.solve(innov, gain_rhs)
    return symmetrize(axa + q - correction)


@dataclass(frozen=True)
class DareSolution:
    p_tilde: np.ndarray
    k_tilde: np.ndarray
    iterations: int
    residual: float

    def __iter__(self):
        # allows ``p, k = dare_solve(sys)``
        yield self.p_tilde
        yield self.k_tilde


def dare_solve(
    sys,
    *,
    tol: float = 1e-12,
    max_iter: int = 100_000,
    damping: float = 1.0,
) -> DareSolution:
    """Stabilizing solution of ``P = g(P)`` by fixed-point iteration from ``I``.

    ``sys`` is anything exposing ``a``, ``c``, ``q_cov`` and ``r_cov``.
    Iteration stops once successive iterates differ by less than
    ``tol`` relative to the current iterate. ``damping`` in (0, 1] blends
    ``P <- (1 - w) P + w g(P)``.

    Returns a :class:`DareSolution`; it unpacks as ``(p_tilde, k_tilde)``.
    """
    a, c, q, r = sys.a, sys.c, sys.q_cov, sys.r_cov
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")
    p = np.eye(a.shape[0])
    step = np.inf
    for it in range(1, max_iter + 1):
        nxt = riccati_map(a, c, q, r, p)
        if damping != 1.0:
            nxt = (1.0 - damping) * p + damping * nxt
        if not np.all(np.isfinite(nxt)):
            raise ConvergenceError("DARE iteration overflowed", iterations=it)
        step = np.linalg.norm(nxt - p, 2)
        p = nxt
        if step <= tol * np.linalg.norm(p, 2):
            break
    else:
        raise ConvergenceError(
            f"DARE iteration did not converge in {max_iter} steps (last step {step:.3g})",
            iterations=max_iter,
            residual=float(step),
        )
    k = -np.linalg.solve(c @ p @ c.T + r, c @ p @ a.T).T
    residual = float(np.linalg.norm(riccati_map(a, c, q, r, p) - p, 2))
    if residual > 1e-8 * np.linalg.norm(p, 2):
        raise ConvergenceError(
            f"DARE residual {residual:.3g} too large", iterations=it, residual=residual
        )
    return DareSolution(p_tilde=p, k_tilde=k, iterations=it, residual=residual)


def psd_sqrt(x, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root via the eigendecomposition.

    Eigenvalues down to ``-tol * max(1, ||x||)`` are clipped to zero;
    anything more negative raises ``ValueError``.
    """
    x = _as_square(x, "x")
    w, v = np.linalg.eigh(symmetrize(x))
    floor = -tol * max(1.0, float(np.max(np.abs(w))))
    if w[0] < floor:
        raise ValueError(f"matrix is not PSD: smallest eigenvalue {w[0]:.3g}")
    w = np.clip(w, 0.0, None)
    return symmetrize((v * np.sqrt(w)) @ v.T)


def power_norm_bound(a, k: int, eps: float) -> float:
    """Right-hand side of ``||A^k|| <= sqrt(n) (1 + 2/eps)^(n-1) (rho(A) + eps ||A||)^k``."""
    a = _as_square(a, "a")
    n = a.shape[0]
    return float(
        np.sqrt(n) * (1.0 + 2.0 / eps) ** (n - 1) * (rho(a) + eps * np.linalg.norm(a, 2)) ** k
    )
