"""Dense state-vector reference for small chains.

Everything here is a test fixture: exact propagation, exact partial traces,
and finite-difference probes of the target functional's curvature and of its
gradient with respect to the control fields.  The implementation shares no
code path with the MPS engine or the analytic gradient, so agreement between
the two is a meaningful check.

Two propagators are provided: `dense_step` applies the exact exp(-i H dt)
through an eigendecomposition of the full Hamiltonian, and
`dense_split_step` applies the same symmetric splitting as the MPS engine
with each factor exact, isolating the tensor-network machinery from the
splitting error when the two implementations are compared interval by
interval.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .entanglement import TargetSpec, purity_deficit
from .model import ChainSpec, ControlFrame
from .mps import PAULI

MAX_DENSE_SPINS = 12


@dataclass(frozen=True)
class DenseState:
    """Unit-norm state vector of n <= 12 spins; site 1 is the leading index."""

    amplitudes: np.ndarray
    n: int

    def __post_init__(self) -> None:
        if self.n > MAX_DENSE_SPINS:
            raise ValueError(f"dense oracle capped at {MAX_DENSE_SPINS} spins, got {self.n}")
        if self.amplitudes.shape != (2**self.n,):
            raise ValueError("amplitude vector does not match spin count")
        if abs(np.linalg.norm(self.amplitudes) - 1.0) > 1e-12:
            raise ValueError("state vector is not normalized")


def dense_product(locals_: list[np.ndarray]) -> DenseState:
    vec = np.array([1.0], dtype=complex)
    for v in locals_:
        vec = np.kron(vec, np.asarray(v, dtype=complex))
    return DenseState(amplitudes=vec, n=len(locals_))


def random_dense(n: int, seed: int) -> DenseState:
    """Haar-random state from a seeded complex Gaussian."""
    rng = np.random.default_rng(seed)
    vec = rng.standard_normal(2**n) + 1j * rng.standard_normal(2**n)
    return DenseState(amplitudes=vec / np.linalg.norm(vec), n=n)


@lru_cache(maxsize=32)
def _site_operators(n: int) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Dense X_i, Y_i, Z_i for every site of an n-spin chain."""
    xs, ys, zs = [], [], []
    for i in range(n):
        left = np.eye(2**i)
        right = np.eye(2 ** (n - 1 - i))
        xs.append(np.kron(np.kron(left, PAULI[1]), right))
        ys.append(np.kron(np.kron(left, PAULI[2]), right))
        zs.append(np.kron(np.kron(left, PAULI[3]), right))
    return xs, ys, zs


def hamiltonian(chain: ChainSpec, fields: np.ndarray) -> np.ndarray:
    """Full 2^N x 2^N Hamiltonian: Ising couplings plus local x/y fields."""
    n = chain.n
    xs, ys, zs = _site_operators(n)
    h = np.zeros((2**n, 2**n), dtype=complex)
    for b in range(n - 1):
        h += chain.couplings[b] * (zs[b] @ zs[b + 1])
    for i in range(n):
        gx, gy = fields[i]
        if gx != 0.0:
            h += gx * xs[i]
        if gy != 0.0:
            h += gy * ys[i]
    return h


def dense_step(state: DenseState, chain: ChainSpec, frame: ControlFrame, dt: float) -> DenseState:
    """Exact exp(-i H dt) through eigendecomposition of the full Hamiltonian."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    vec = _propagate(state.amplitudes, chain, frame.fields, dt)
    return DenseState(amplitudes=vec / np.linalg.norm(vec), n=state.n)


def _propagate(vec: np.ndarray, chain: ChainSpec, fields: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i H dt) |vec>; dt may be negative (backwards propagation)."""
    h = hamiltonian(chain, fields)
    evals, evecs = np.linalg.eigh(h)
    return evecs @ (np.exp(-1j * evals * dt) * (evecs.conj().T @ vec))


def dense_split_step(
    state: DenseState, chain: ChainSpec, frame: ControlFrame, dt: float
) -> DenseState:
    """Same symmetric splitting as the MPS engine, each factor exact.

    Half local rotations, all coupling phases (diagonal, mutually commuting),
    half local rotations.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = state.n
    vec = state.amplitudes.copy()
    vec = _apply_rotations(vec, n, frame.fields, dt / 2.0)
    vec = vec * _coupling_phases(chain, dt)
    vec = _apply_rotations(vec, n, frame.fields, dt / 2.0)
    return DenseState(amplitudes=vec / np.linalg.norm(vec), n=n)


def _apply_rotations(vec: np.ndarray, n: int, fields: np.ndarray, t: float) -> np.ndarray:
    for i in range(n):
        gx, gy = fields[i]
        if gx == 0.0 and gy == 0.0:
            continue
        omega = np.hypot(gx, gy)
        u = np.cos(omega * t) * PAULI[0] - 1j * (np.sin(omega * t) / omega) * (
            gx * PAULI[1] + gy * PAULI[2]
        )
        block = vec.reshape(2**i, 2, 2 ** (n - 1 - i))
        vec = np.einsum("ab,lbr->lar", u, block).reshape(-1)
    return vec


@lru_cache(maxsize=64)
def _z_diagonals(n: int) -> np.ndarray:
    """z eigenvalue (+1/-1) of every site over all basis states, shape (n, 2^n)."""
    diags = np.empty((n, 2**n))
    for i in range(n):
        pattern = np.array([1.0, -1.0]).repeat(2 ** (n - 1 - i))
        diags[i] = np.tile(pattern, 2**i)
    return diags


def _coupling_phases(chain: ChainSpec, dt: float) -> np.ndarray:
    z = _z_diagonals(chain.n)
    exponent = np.zeros(2**chain.n)
    for b in range(chain.n - 1):
        exponent += chain.couplings[b] * z[b] * z[b + 1]
    return np.exp(-1j * dt * exponent)


def dense_rdm(state: DenseState, sites: list[int] | tuple[int, ...]) -> np.ndarray:
    """Partial trace onto the given 1-based sites (ascending order)."""
    sites = sorted(sites)
    if len(set(sites)) != len(sites) or sites[0] < 1 or sites[-1] > state.n:
        raise ValueError(f"invalid sites {sites}")
    kept = [s - 1 for s in sites]
    rest = [i for i in range(state.n) if i not in kept]
    psi = state.amplitudes.reshape((2,) * state.n).transpose(kept + rest)
    psi = psi.reshape(2 ** len(kept), -1)
    return psi @ psi.conj().T


def tau_dense(state: DenseState, target: TargetSpec) -> float:
    """Target functional evaluated with dense partial traces only."""
    a, b = target.pair
    value = purity_deficit(dense_rdm(state, [a])) + purity_deficit(dense_rdm(state, [b]))
    if target.mu != 0.0:
        value -= target.mu * purity_deficit(dense_rdm(state, [a, b]))
    for k in np.flatnonzero(target.alpha):
        value -= target.alpha[k] * purity_deficit(dense_rdm(state, [int(k) + 1]))
    return value


def tau_curvature_fd(
    state: DenseState,
    chain: ChainSpec,
    frame: ControlFrame,
    target: TargetSpec,
    dt_fd: float = 1e-4,
    ramp: np.ndarray | None = None,
    substeps: int = 8,
) -> float:
    """Second time derivative of the target functional by central differences.

    Propagates dense states forwards and backwards over dt_fd.  When `ramp`
    is given (same shape as the fields), the fields change linearly in time
    through the frame's value at t=0; the propagation then uses midpoint
    sub-steps.
    """
    tau0 = tau_dense(state, target)
    if ramp is None:
        fwd = _propagate(state.amplitudes, chain, frame.fields, dt_fd)
        bwd = _propagate(state.amplitudes, chain, frame.fields, -dt_fd)
    else:
        fwd = _propagate_ramped(state.amplitudes, chain, frame.fields, ramp, dt_fd, substeps)
        bwd = _propagate_ramped(state.amplitudes, chain, frame.fields, ramp, -dt_fd, substeps)
    tau_f = tau_dense(DenseState(fwd / np.linalg.norm(fwd), state.n), target)
    tau_b = tau_dense(DenseState(bwd / np.linalg.norm(bwd), state.n), target)
    return (tau_f - 2.0 * tau0 + tau_b) / dt_fd**2


def tau_rate_fd(
    state: DenseState,
    chain: ChainSpec,
    frame: ControlFrame,
    target: TargetSpec,
    dt_fd: float = 1e-4,
) -> float:
    """First time derivative of the target functional by central differences."""
    fwd = _propagate(state.amplitudes, chain, frame.fields, dt_fd)
    bwd = _propagate(state.amplitudes, chain, frame.fields, -dt_fd)
    tau_f = tau_dense(DenseState(fwd / np.linalg.norm(fwd), state.n), target)
    tau_b = tau_dense(DenseState(bwd / np.linalg.norm(bwd), state.n), target)
    return (tau_f - tau_b) / (2.0 * dt_fd)


def _propagate_ramped(
    vec: np.ndarray,
    chain: ChainSpec,
    fields: np.ndarray,
    ramp: np.ndarray,
    dt: float,
    substeps: int,
) -> np.ndarray:
    sub = dt / substeps
    out = vec
    for k in range(substeps):
        t_mid = (k + 0.5) * sub
        out = _propagate(out, chain, fields + ramp * t_mid, sub)
    return out


def grad_fd(
    state: DenseState,
    chain: ChainSpec,
    target: TargetSpec,
    site: int,
    axis: int,
    dg: float = 1e-3,
    dt_fd: float = 1e-4,
    base: np.ndarray | None = None,
) -> float:
    """d(tau'')/dg for one field component (site 1-based, axis 0=x, 1=y).

    The curvature is affine in the fields, so the central difference is exact
    up to the dt_fd discretization regardless of dg; a larger dg suppresses
    round-off.
    """
    fields = np.zeros((state.n, 2)) if base is None else base.copy()
    delta = 1e-9  # frame duration is irrelevant here, only fields matter
    plus = fields.copy()
    plus[site - 1, axis] += dg
    minus = fields.copy()
    minus[site - 1, axis] -= dg
    c_plus = tau_curvature_fd(state, chain, ControlFrame(plus, delta), target, dt_fd)
    c_minus = tau_curvature_fd(state, chain, ControlFrame(minus, delta), target, dt_fd)
    return (c_plus - c_minus) / (2.0 * dg)


def grad_fd_all(
    state: DenseState,
    chain: ChainSpec,
    target: TargetSpec,
    dg: float = 1e-3,
    dt_fd: float = 1e-4,
) -> np.ndarray:
    """Finite-difference gradient of the curvature, shape (N, 2)."""
    out = np.empty((state.n, 2))
    for site in range(1, state.n + 1):
        for axis in (0, 1):
            out[site - 1, axis] = grad_fd(state, chain, target, site, axis, dg, dt_fd)
    return out


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a.reshape(-1), b.reshape(-1)) / (na * nb))
