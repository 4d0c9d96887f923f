"""Gilbert-Elliott packet-loss process.

``gamma_k = 1`` means the measurement at time k arrived. The failure rate
``p`` is P(gamma_{k+1} = 0 | gamma_k = 1) and the recovery rate ``q`` is
P(gamma_{k+1} = 1 | gamma_k = 0).

Randomness comes from numpy's ``PCG64`` bit generator seeded through
``SeedSequence``; independent streams are obtained with
``SeedSequence.spawn`` so results do not depend on platform or on the
order in which streams are consumed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import TextIO, Union

import numpy as np

from .errors import PreconditionError

__all__ = [
    "GilbertElliott",
    "LossTrajectory",
    "SeedLike",
    "make_rng",
    "stopping_times",
    "sample",
    "sample_gammas",
    "coupled_sample",
    "coupled_transition_matrix",
    "COUPLED_STATES",
    "write_trajectory_csv",
    "write_coupled_csv",
]

SeedLike = Union[int, np.random.SeedSequence, np.random.Generator, None]


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


@dataclass(frozen=True)
class GilbertElliott:
    p: float
    q: float
    initial_state: int = 1

    def __post_init__(self):
        for name, val in (("p", self.p), ("q", self.q)):
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {val}")
        if self.initial_state not in (0, 1):
            raise ValueError(f"initial_state must be 0 or 1, got {self.initial_state}")

    @property
    def transition_matrix(self) -> np.ndarray:
        """Rows/columns ordered (state 0, state 1)."""
        p, q = self.p, self.q
        return np.array([[1.0 - q, q], [p, 1.0 - p]])

    def stationary(self) -> tuple[float, float]:
        """Long-run ``(P(gamma = 1), P(gamma = 0))``."""
        s = self.p + self.q
        return self.q / s, self.p / s


@dataclass(frozen=True)
class LossTrajectory:
    """A realized arrival sequence plus its burst structure.

    Times are 1-based: ``gammas[k - 1]`` is gamma_k. ``taus[j]`` is the
    first loss of the j-th burst and ``betas[j]`` the first arrival after
    it; only complete bursts (both ends inside the horizon) are listed
    in ``betas``.
    """

    gammas: np.ndarray
    taus: np.ndarray
    betas: np.ndarray
    tau_stars: np.ndarray
    beta_stars: np.ndarray

    @property
    def length(self) -> int:
        return int(self.gammas.size)


def stopping_times(gammas) -> LossTrajectory:
    g = np.asarray(gammas, dtype=np.int8).reshape(-1)
    if g.size and not np.all((g == 0) | (g == 1)):
        raise ValueError("gammas must contain only 0 and 1")
    prev = np.concatenate(([1], g[:-1]))
    # a burst starts at a 0 preceded by a 1 (or at k=1); it ends at the next 1
    taus = np.flatnonzero((g == 0) & (prev == 1)) + 1
    betas = np.flatnonzero((g == 1) & (prev == 0)) + 1
    betas = betas[: taus.size]
    prev_beta = np.concatenate(([1], betas))[: taus.size]
    tau_stars = taus - prev_beta
    beta_stars = betas - taus[: betas.size]
    return LossTrajectory(
        gammas=g,
        taus=taus.astype(np.int64),
        betas=betas.astype(np.int64),
        tau_stars=tau_stars.astype(np.int64),
        beta_stars=beta_stars.astype(np.int64),
    )


def _chain_from_uniforms(u: np.ndarray, p: float, q: float, initial_state: int) -> np.ndarray:
    """Run the two-state chain driven by one uniform per transition.

    From state 1 the next state is ``u >= p``; from state 0 it is ``u < q``.
    Where both rules agree the next state is forced; otherwise the step
    either keeps or toggles the current state, so the path is the parity
    of toggles since the last forced step.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[None, :]
    batch, steps = u.shape
    out = np.empty((batch, steps + 1), dtype=np.int8)
    out[:, 0] = initial_state
    if steps == 0:
        return out
    from_one = u >= p
    from_zero = u < q
    forced = from_one == from_zero
    toggle = (~from_one) & from_zero
    ctog = np.cumsum(toggle, axis=1)
    idx = np.broadcast_to(np.arange(steps), (batch, steps))
    last = np.maximum.accumulate(np.where(forced, idx, -1), axis=1)
    has = last >= 0
    lastc = np.clip(last, 0, None)
    anchor = np.where(has, np.take_along_axis(from_one, lastc, axis=1), bool(initial_state))
    base = np.where(has, np.take_along_axis(ctog, lastc, axis=1), 0)
    out[:, 1:] = anchor ^ ((ctog - base) & 1).astype(bool)
    return out


def sample_gammas(ch: GilbertElliott, length: int, seed: SeedLike) -> np.ndarray:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    rng = make_rng(seed)
    u = rng.random(length - 1)
    return _chain_from_uniforms(u, ch.p, ch.q, ch.initial_state)[0]


def sample(ch: GilbertElliott, length: int, seed: SeedLike) -> LossTrajectory:
    """Draw gamma_1..gamma_T with gamma_1 = ``ch.initial_state``.

    Each transition consumes one ``Generator.random()`` draw, so a given
    ``(seed, T, p, q)`` always yields the same sequence.
    """
    return stopping_times(sample_gammas(ch, length, seed))


# -- monotone coupling -------------------------------------------------------

#: coupled states (z, z_tilde); index order used by the transition matrix
COUPLED_STATES = ((0, 0), (0, 1), (1, 1))


def coupled_transition_matrix(p1: float, p2: float, q: float) -> np.ndarray:
    """Transition matrix over :data:`COUPLED_STATES` for failure rates p1 > p2."""
    return np.array(
        [
            [1.0 - q, 0.0, q],
            [p2, 1.0 - q - p2, q],
            [p2, p1 - p2, 1.0 - p1],
        ]
    )


def coupled_sample(
    p1: float,
    p2: float,
    q: float,
    length: int,
    seed: SeedLike,
    initial=(1, 1),
) -> np.ndarray:
    """Jointly sample two loss chains with failure rates ``p1 >= p2`` and a
    shared recovery rate so that ``z_k <= z_tilde_k`` on every path.

    Returns an int8 array of shape (length, 2) with columns (z, z_tilde).
    The z column is marginally a Gilbert-Elliott chain with failure rate p1,
    z_tilde one with failure rate p2.
    """
    if not (0.0 < p2 <= p1 < 1.0 and 0.0 < q < 1.0):
        raise ValueError(f"need 0 < p2 <= p1 < 1 and 0 < q < 1, got p1={p1}, p2={p2}, q={q}")
    if p2 + q > 1.0:
        raise PreconditionError(f"p2 + q = {p2 + q:.6g} > 1: no monotone coupling with valid probabilities")
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    state = COUPLED_STATES.index(tuple(int(v) for v in initial))
    cum = np.cumsum(coupled_transition_matrix(p1, p2, q), axis=1)
    cum[:, -1] = 1.0
    u = make_rng(seed).random(length - 1)
    states = np.empty(length, dtype=np.int64)
    states[0] = state
    for k in range(length - 1):
        row = cum[state]
        state = 0 if u[k] < row[0] else (1 if u[k] < row[1] else 2)
        states[k + 1] = state
    table = np.array(COUPLED_STATES, dtype=np.int8)
    return table[states]


def write_trajectory_csv(fh: TextIO, traj: LossTrajectory) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "gamma"])
    for k, g in enumerate(traj.gammas, start=1):
        w.writerow([k, int(g)])


def write_coupled_csv(fh: TextIO, pairs: np.ndarray) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["k", "z", "z_tilde"])
    for k, (z, zt) in enumerate(pairs, start=1):
        w.writerow([k, int(z), int(zt)])
