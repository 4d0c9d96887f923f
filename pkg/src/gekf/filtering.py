"""Prediction-error covariance recursion under intermittent observations.

``P_{k+1} = h(P_k)`` when the measurement at time k is lost and
``P_{k+1} = g(P_k)`` when it arrives, with

    h(X) = A X A' + Q
    g(X) = A X A' + Q - A X C' (C X C' + R)^-1 C X A'.

Time indices are 1-based and ``P_1 = Sigma0``; gamma_1 is applied to
produce P_2. The covariance at index ``beta_j`` is the peak covariance of
the j-th loss burst.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .channel import LossTrajectory, stopping_times
from .model import LtiSystem, StackedMatrices
from .numerics import riccati_map, symmetrize

__all__ = [
    "CovTrajectory",
    "OVERFLOW_LIMIT",
    "h_op",
    "g_op",
    "h_iter",
    "g_iter",
    "riccati_step",
    "run_covariance",
    "run_covariance_batch",
    "phi_op",
    "optimal_phi_gain",
    "write_covariance_csv",
    "write_peaks_csv",
]

OVERFLOW_LIMIT = 1e300


def h_op(sys: LtiSystem, x: np.ndarray) -> np.ndarray:
    return symmetrize(sys.a @ x @ sys.a.T + sys.q_cov)


def g_op(sys: LtiSystem, x: np.ndarray) -> np.ndarray:
    return riccati_map(sys.a, sys.c, sys.q_cov, sys.r_cov, x)


def h_iter(sys: LtiSystem, x: np.ndarray, k: int) -> np.ndarray:
    for _ in range(k):
        x = h_op(sys, x)
    return x


def g_iter(sys: LtiSystem, x: np.ndarray, k: int) -> np.ndarray:
    for _ in range(k):
        x = g_op(sys, x)
    return x


def riccati_step(sys: LtiSystem, p_prev: np.ndarray, gamma: int) -> np.ndarray:
    return g_op(sys, p_prev) if gamma else h_op(sys, p_prev)


@dataclass(frozen=True)
class CovTrajectory:
    """Covariances P_1..P_T (``covs[k - 1]`` is P_k) and their 2-norms.

    When an entry exceeds :data:`OVERFLOW_LIMIT` the trajectory stops there:
    ``diverged`` is set and the arrays hold only the finite prefix.
    """

    covs: np.ndarray
    norms: np.ndarray
    peak_indices: np.ndarray
    peak_norms: np.ndarray
    gammas: np.ndarray
    diverged: bool = False

    @property
    def length(self) -> int:
        return int(self.norms.size)


def _psd_norm(x: np.ndarray) -> np.ndarray:
    # 2-norm of a symmetric PSD matrix is its largest eigenvalue
    return np.linalg.eigvalsh(x)[..., -1]


def run_covariance(sys: LtiSystem, traj: LossTrajectory | np.ndarray, sigma0=None) -> CovTrajectory:
    """Iterate the lossy Riccati recursion along ``traj.gammas``."""
    if not isinstance(traj, LossTrajectory):
        traj = stopping_times(traj)
    gammas = traj.gammas
    T = gammas.size
    n = sys.n
    p = np.array(sys.sigma0 if sigma0 is None else sigma0, dtype=float)
    covs = np.empty((T, n, n))
    covs[0] = p
    diverged = False
    last = T
    for k in range(1, T):
        p = riccati_step(sys, p, int(gammas[k - 1]))
        if not np.all(np.abs(p) < OVERFLOW_LIMIT):
            diverged = True
            last = k
            break
        covs[k] = p
    covs = covs[:last]
    norms = _psd_norm(covs)
    peaks = traj.betas[traj.betas <= last]
    return CovTrajectory(
        covs=covs,
        norms=norms,
        peak_indices=peaks,
        peak_norms=norms[peaks - 1],
        gammas=gammas,
        diverged=diverged,
    )


def run_covariance_batch(sys: LtiSystem, gammas: np.ndarray, sigma0=None, return_covs: bool = False):
    """Vectorized recursion over N independent arrival sequences.

    Parameters
    ----------
    gammas : (N, T) int array
    return_covs : bool
        Also return the (N, T, n, n) stack of covariances.

    Returns
    -------
    norms : (N, T) array
        ``||P_k||`` per trial; ``inf`` from the step a trial overflowed on.
    diverged : (N,) bool array
    covs : (N, T, n, n) array, only with ``return_covs``
    """
    gammas = np.asarray(gammas)
    N, T = gammas.shape
    n = sys.n
    p = np.broadcast_to(np.asarray(sys.sigma0 if sigma0 is None else sigma0, dtype=float), (N, n, n)).copy()
    norms = np.empty((N, T))
    norms[:, 0] = _psd_norm(p)
    covs = None
    if return_covs:
        covs = np.empty((N, T, n, n))
        covs[:, 0] = p
    alive = np.ones(N, dtype=bool)
    arrive = gammas.astype(bool)
    a, q = sys.a, sys.q_cov
    for k in range(1, T):
        h = symmetrize(a @ p @ a.T + q)
        g = riccati_map(a, sys.c, q, sys.r_cov, p)
        p = np.where(arrive[:, k - 1, None, None], g, h)
        bad = ~np.all(np.abs(p) < OVERFLOW_LIMIT, axis=(1, 2))
        if bad.any():
            alive &= ~bad
            p[~alive] = 0.0
        norms[:, k] = np.where(alive, _psd_norm(p), np.inf)
        if covs is not None:
            covs[:, k] = np.where(alive[:, None, None], p, np.inf)
    if covs is not None:
        return norms, ~alive, covs
    return norms, ~alive


def phi_op(sys: LtiSystem, stacks: StackedMatrices, i: int, k_gain: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Covariance of an ``i``-step linear predictor with gain ``K^(i)``:

        (A^i + K C^(i)) X (.)' + [A^(i)  K] J_i [A^(i)  K]'

    It upper-bounds ``g^i(X)`` for every gain and meets it at the optimum.
    """
    if i not in stacks.c_stack:
        raise ValueError(f"horizon {i} not in stacks (have {stacks.horizons})")
    ci = stacks.c_stack[i]
    k_gain = np.asarray(k_gain, dtype=float)
    if k_gain.shape != (sys.n, ci.shape[0]):
        raise ValueError(f"K^({i}) must be {sys.n} x {ci.shape[0]}, got {k_gain.shape}")
    m_i = stacks.a_pow[i] + k_gain @ ci
    ak = np.hstack([stacks.a_stack[i], k_gain])
    return symmetrize(m_i @ x @ m_i.T + ak @ stacks.j_mat[i] @ ak.T)


def optimal_phi_gain(sys: LtiSystem, stacks: StackedMatrices, i: int, x: np.ndarray) -> np.ndarray:
    """Gain minimizing :func:`phi_op` in the PSD order (completing the square)."""
    ci = stacks.c_stack[i]
    nq = stacks.a_stack[i].shape[1]
    j = stacks.j_mat[i]
    j12, j22 = j[:nq, nq:], j[nq:, nq:]
    ai = stacks.a_pow[i]
    cross = ai @ x @ ci.T + stacks.a_stack[i] @ j12
    s = ci @ x @ ci.T + j22
    return -np.linalg.solve(s, cross.T).T


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_covariance_csv(fh: TextIO, cov: CovTrajectory) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "gamma", "norm_P"])
    for k in range(1, cov.length + 1):
        w.writerow([k, int(cov.gammas[k - 1]), _fmt(cov.norms[k - 1])])


def write_peaks_csv(fh: TextIO, cov: CovTrajectory) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["j", "beta_j", "norm_P_beta_j"])
    for j, (b, v) in enumerate(zip(cov.peak_indices, cov.peak_norms), start=1):
        w.writerow([j, int(b), _fmt(v)])
