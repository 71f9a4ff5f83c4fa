"""Purity-deficit target functional and Wootters concurrence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mps
from .mps import MpsState, Rdm, Snapshot

SIGMA_YY = np.kron(mps.PAULI[2], mps.PAULI[2])


@dataclass(frozen=True)
class TargetSpec:
    """Which pair to entangle and how to penalize entanglement elsewhere.

    pair is (a, b) with 1-based sites; mu weighs the pair-purity term; alpha
    holds the per-site penalty weights (alpha[a-1] = alpha[b-1] = 0).  The
    penalty mask is the set of sites with nonzero alpha.
    """

    pair: tuple[int, int]
    mu: float
    alpha: np.ndarray

    def __post_init__(self) -> None:
        a, b = self.pair
        alpha = np.asarray(self.alpha, dtype=float)
        object.__setattr__(self, "alpha", alpha)
        n = alpha.shape[0]
        if not (1 <= a <= n and 1 <= b <= n and a != b):
            raise ValueError(f"invalid target pair {self.pair} for {n} sites")
        if a > b:
            raise ValueError("target pair must be ordered (a < b)")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if np.any(alpha < 0):
            raise ValueError("alpha weights must be non-negative")
        if alpha[a - 1] != 0.0 or alpha[b - 1] != 0.0:
            raise ValueError("alpha must vanish on the target pair")

    @property
    def n(self) -> int:
        return self.alpha.shape[0]

    @property
    def penalty_sites(self) -> tuple[int, ...]:
        """1-based sites with an active penalty."""
        return tuple(int(k) + 1 for k in np.flatnonzero(self.alpha))

    @classmethod
    def uniform(cls, n: int, j: int, mu: float = 0.0, weight: float = 1.0) -> TargetSpec:
        """Target (1, j) with the same penalty weight on every other site."""
        alpha = np.full(n, weight)
        alpha[0] = 0.0
        alpha[j - 1] = 0.0
        return cls(pair=(1, j), mu=mu, alpha=alpha)

    @classmethod
    def masked(cls, n: int, j: int, mask: set[int], mu: float = 0.0, weight: float = 1.0) -> TargetSpec:
        """Target (1, j) with penalties only inside `mask` (excluding the pair)."""
        alpha = np.zeros(n)
        for site in mask:
            if site not in (1, j):
                alpha[site - 1] = weight
        return cls(pair=(1, j), mu=mu, alpha=alpha)


def purity_deficit(rho: Rdm | np.ndarray) -> float:
    """1 - tr(rho^2); zero for pure states, 1 - 2^-m for maximally mixed."""
    m = rho.matrix if isinstance(rho, Rdm) else rho
    return float(1.0 - np.vdot(m, m).real)


def tau_from_snapshot(snap: Snapshot, target: TargetSpec) -> float:
    """Target functional from a precomputed snapshot (pair must be (1, j))."""
    a, b = target.pair
    if a != 1:
        raise ValueError("snapshot evaluation requires pair (1, j)")
    value = purity_deficit(snap.singles[0]) + purity_deficit(snap.singles[b - 1])
    if target.mu != 0.0:
        value -= target.mu * purity_deficit(snap.pairs_end[b - 2])
    alpha = target.alpha
    for k in np.flatnonzero(alpha):
        value -= alpha[k] * purity_deficit(snap.singles[k])
    return value


def tau(state: MpsState, target: TargetSpec) -> float:
    """Pair purity deficits minus pair-mixedness and off-target penalties."""
    a, b = target.pair
    if a == 1:
        return tau_from_snapshot(mps.snapshot(state), target)
    value = purity_deficit(mps.rdm(state, [a])) + purity_deficit(mps.rdm(state, [b]))
    if target.mu != 0.0:
        value -= target.mu * purity_deficit(mps.rdm(state, [a, b]))
    for k in np.flatnonzero(target.alpha):
        value -= target.alpha[k] * purity_deficit(mps.rdm(state, [int(k) + 1]))
    return value


def concurrence(rho: Rdm | np.ndarray) -> float:
    """Wootters concurrence of a two-qubit density matrix.

    Evaluated through the Hermitian form sqrt(rho) (Y⊗Y) rho* (Y⊗Y) sqrt(rho),
    whose eigenvalues match those of the usual non-Hermitian spin-flip product
    but are numerically stable; round-off negatives are clamped before the
    square roots.
    """
    m = rho.matrix if isinstance(rho, Rdm) else rho
    if m.shape != (4, 4):
        raise ValueError(f"concurrence needs a 4x4 matrix, got {m.shape}")
    evals, evecs = np.linalg.eigh(m)
    evals = np.clip(evals, 0.0, None)
    sqrt_m = (evecs * np.sqrt(evals)) @ evecs.conj().T
    flipped = SIGMA_YY @ m.conj() @ SIGMA_YY
    herm = sqrt_m @ flipped @ sqrt_m
    herm = 0.5 * (herm + herm.conj().T)
    mu = np.sort(np.clip(np.linalg.eigvalsh(herm), 0.0, None))[::-1]
    roots = np.sqrt(mu)
    return float(max(0.0, roots[0] - roots[1] - roots[2] - roots[3]))


def end_pair_concurrences(snap: Snapshot) -> np.ndarray:
    """Concurrence of every pair (1, k) for k = 2..N, from a snapshot."""
    return np.array([concurrence(m) for m in snap.pairs_end])
