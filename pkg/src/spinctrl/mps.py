"""Matrix product state engine for open spin-1/2 chains.

A state of N spins is stored as a list of rank-3 tensors with index order
(left bond, physical, right bond); boundary bonds have dimension 1.  The
engine provides product-state initialization, one control interval of time
evolution under an Ising chain plus piecewise-constant local fields, reduced
density matrices of up to three (possibly non-contiguous) sites, Pauli-string
expectation values, and a fused one-sweep extraction of all single-site,
nearest-neighbour and end-anchored two-site density matrices used by the
control loop.

Time evolution uses a second-order symmetric splitting per interval: a half
rotation of every local field, one sweep of two-site coupling gates (these
all commute with each other, so the sweep order carries no extra splitting
error), and a second half rotation.  Each two-site gate is followed by an
SVD truncated to the bond-dimension cap with a relative floor on squared
singular values; the discarded weight is accumulated on the state.

Public site indices are 1-based (sites 1..N), matching the chain convention
used by the rest of the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ChainSpec, ControlFrame

PAULI = (
    np.eye(2, dtype=complex),
    np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
    np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex),
    np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex),
)

PLUS = np.array([1.0, 1.0], dtype=complex) / np.sqrt(2.0)

# Relative floor on squared singular values kept during truncation.
TRUNCATION_FLOOR = 1e-12


@dataclass(frozen=True)
class Rdm:
    """Reduced density matrix of 1 to 3 sites (1-based, sorted).

    Validates hermiticity, unit trace and positivity (with numerical slack)
    on construction.
    """

    sites: tuple[int, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = len(self.sites)
        if not 1 <= m <= 3:
            raise ValueError(f"Rdm supports 1 to 3 sites, got {m}")
        if len(set(self.sites)) != m or list(self.sites) != sorted(self.sites):
            raise ValueError(f"sites must be sorted and distinct, got {self.sites}")
        dim = 2**m
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match {m} sites")
        if np.max(np.abs(self.matrix - self.matrix.conj().T)) > 1e-12:
            raise ValueError("reduced density matrix is not Hermitian")
        if abs(np.trace(self.matrix).real - 1.0) > 1e-10:
            raise ValueError("reduced density matrix does not have unit trace")
        if np.linalg.eigvalsh(self.matrix).min() < -1e-9:
            raise ValueError("reduced density matrix has a significantly negative eigenvalue")


@dataclass
class MpsState:
    """N-spin pure state in matrix product form.

    Attributes:
        tensors: one (left, 2, right) complex array per site.
        d_max: bond-dimension cap enforced at every truncation.
        canonical_center: 0-based site index of the orthogonality center, or
            None when the gauge is unknown.  Tensors left of the center are
            left-isometries, tensors right of it are right-isometries.
        discarded_weight_total: accumulated squared singular values dropped
            by truncations, relative to the pre-truncation norm.  Never
            decreases.
        norm_tolerance: allowed deviation of <psi|psi> from 1.
        last_step_norm_drift: largest norm drift observed inside the most
            recent evolution step, before renormalization.
    """

    tensors: list[np.ndarray]
    d_max: int
    canonical_center: int | None = None
    discarded_weight_total: float = 0.0
    norm_tolerance: float = 1e-8
    last_step_norm_drift: float = field(default=0.0, repr=False)

    def __post_init__(self) -> None:
        if self.d_max < 1:
            raise ValueError(f"d_max must be >= 1, got {self.d_max}")
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ValueError("boundary bonds must have dimension 1")
        right = self.tensors[0].shape[2]
        for t in self.tensors[1:]:
            if t.shape[1] != 2:
                raise ValueError("physical dimension must be 2")
            if t.shape[0] != right:
                raise ValueError("adjacent bond dimensions do not match")
            right = t.shape[2]

    @property
    def n(self) -> int:
        return len(self.tensors)

    def bond_dims(self) -> list[int]:
        """Internal bond dimensions (length N-1)."""
        return [t.shape[2] for t in self.tensors[:-1]]

    def copy(self) -> MpsState:
        """Shallow tensor-list copy; tensors are replaced, never mutated in place."""
        return MpsState(
            tensors=list(self.tensors),
            d_max=self.d_max,
            canonical_center=self.canonical_center,
            discarded_weight_total=self.discarded_weight_total,
            norm_tolerance=self.norm_tolerance,
            last_step_norm_drift=self.last_step_norm_drift,
        )

    def norm(self) -> float:
        if self.canonical_center is not None:
            return float(np.linalg.norm(self.tensors[self.canonical_center]))
        return float(np.sqrt(abs(overlap(self, self))))

    def ensure_center(self, center: int) -> None:
        """Bring the state into mixed-canonical form around `center` (0-based).

        Moves only the gauge; the physical state is unchanged.
        """
        if not 0 <= center < self.n:
            raise ValueError(f"center {center} out of range")
        if self.canonical_center is None:
            for i in range(center):
                self._shift_right(i)
            for i in range(self.n - 1, center, -1):
                self._shift_left(i)
        elif self.canonical_center < center:
            for i in range(self.canonical_center, center):
                self._shift_right(i)
        elif self.canonical_center > center:
            for i in range(self.canonical_center, center, -1):
                self._shift_left(i)
        self.canonical_center = center

    def renormalize(self) -> float:
        """Rescale to unit norm; returns the absolute drift that was removed."""
        if self.canonical_center is None:
            self.ensure_center(0)
        c = self.canonical_center
        nrm = float(np.linalg.norm(self.tensors[c]))
        if nrm == 0.0:
            raise ValueError("cannot renormalize a zero state")
        self.tensors[c] = self.tensors[c] / nrm
        return abs(nrm - 1.0)

    def _shift_right(self, i: int) -> None:
        """QR-move the center from site i to i+1 (makes site i a left-isometry)."""
        t = self.tensors[i]
        dl, _, dr = t.shape
        q, r = np.linalg.qr(t.reshape(dl * 2, dr))
        k = q.shape[1]
        self.tensors[i] = q.reshape(dl, 2, k)
        self.tensors[i + 1] = np.tensordot(r, self.tensors[i + 1], axes=(1, 0))

    def _shift_left(self, i: int) -> None:
        """QR-move the center from site i to i-1 (makes site i a right-isometry)."""
        t = self.tensors[i]
        dl, _, dr = t.shape
        q, r = np.linalg.qr(t.reshape(dl, 2 * dr).conj().T)
        k = q.shape[1]
        self.tensors[i] = q.conj().T.reshape(k, 2, dr)
        self.tensors[i - 1] = np.tensordot(self.tensors[i - 1], r.conj().T, axes=(2, 0))


def from_product_state(locals_: list[np.ndarray], d_max: int) -> MpsState:
    """Build a bond-dimension-1 state from normalized single-spin vectors."""
    if len(locals_) < 2:
        raise ValueError(f"need at least 2 spins, got {len(locals_)}")
    tensors = []
    for k, v in enumerate(locals_):
        v = np.asarray(v, dtype=complex).reshape(-1)
        if v.shape != (2,):
            raise ValueError(f"local state at site {k + 1} is not a 2-vector")
        if abs(np.linalg.norm(v) - 1.0) > 1e-10:
            raise ValueError(f"local state at site {k + 1} is not normalized")
        tensors.append(v.reshape(1, 2, 1))
    return MpsState(tensors=tensors, d_max=d_max, canonical_center=0)


def plus_product(n: int, d_max: int) -> MpsState:
    """All-spins-along-+x product state, the protocol's initial state."""
    return from_product_state([PLUS] * n, d_max)


def from_statevector(vec: np.ndarray, d_max: int | None = None) -> MpsState:
    """Exact (or capped) MPS factorization of a dense state vector."""
    vec = np.asarray(vec, dtype=complex).reshape(-1)
    n = int(round(np.log2(vec.size)))
    if 2**n != vec.size:
        raise ValueError(f"vector length {vec.size} is not a power of 2")
    if n > 16:
        raise ValueError("dense conversion capped at 16 spins")
    cap = d_max if d_max is not None else 2 ** (n // 2)
    tensors = []
    rest = vec.reshape(1, -1)
    for _ in range(n - 1):
        dl = rest.shape[0]
        m = rest.reshape(dl * 2, -1)
        u, s, vh = np.linalg.svd(m, full_matrices=False)
        k = max(1, min(cap, int(np.count_nonzero(s > 1e-14 * s[0]))))
        tensors.append(u[:, :k].reshape(dl, 2, k))
        rest = s[:k, None] * vh[:k]
    tensors.append(rest.reshape(rest.shape[0], 2, 1))
    state = MpsState(tensors=tensors, d_max=cap, canonical_center=n - 1)
    state.renormalize()
    state.ensure_center(0)
    return state


def to_statevector(state: MpsState) -> np.ndarray:
    """Contract to a dense 2**N vector (small N only)."""
    if state.n > 16:
        raise ValueError("dense conversion capped at 16 spins")
    vec = state.tensors[0]
    for t in state.tensors[1:]:
        vec = np.tensordot(vec, t, axes=(vec.ndim - 1, 0))
    return np.squeeze(vec, axis=(0, vec.ndim - 1)).reshape(-1)


def overlap(a: MpsState, b: MpsState) -> complex:
    """<a|b> by transfer contraction; bond dimensions may differ."""
    if a.n != b.n:
        raise ValueError("states have different lengths")
    env = np.ones((1, 1), dtype=complex)
    for ta, tb in zip(a.tensors, b.tensors):
        tmp = np.tensordot(env, ta.conj(), axes=(0, 0))  # (l_b, s, r_a*)
        env = np.tensordot(tmp, tb, axes=((0, 1), (0, 1)))  # (r_a*, r_b)
    return complex(env[0, 0])


def fidelity(a: MpsState, b: MpsState) -> float:
    """|<a|b>|^2."""
    return abs(overlap(a, b)) ** 2


def canonical_defect(state: MpsState) -> float:
    """Largest deviation of any tensor from its declared isometry property."""
    if state.canonical_center is None:
        raise ValueError("state has no declared canonical center")
    worst = 0.0
    for i, t in enumerate(state.tensors):
        dl, _, dr = t.shape
        if i < state.canonical_center:
            m = t.reshape(dl * 2, dr)
            worst = max(worst, float(np.max(np.abs(m.conj().T @ m - np.eye(dr)))))
        elif i > state.canonical_center:
            m = t.reshape(dl, 2 * dr)
            worst = max(worst, float(np.max(np.abs(m @ m.conj().T - np.eye(dl)))))
    return worst


def _rotation_gate(gx: float, gy: float, t: float) -> np.ndarray:
    """exp(-i t (gx X + gy Y)) in closed form."""
    omega = np.hypot(gx, gy)
    if omega == 0.0:
        return PAULI[0]
    c, s = np.cos(omega * t), np.sin(omega * t)
    return c * PAULI[0] - 1.0j * (s / omega) * (gx * PAULI[1] + gy * PAULI[2])


def _apply_local_rotations(state: MpsState, fields: np.ndarray, t: float) -> None:
    """Apply exp(-i t (gx_i X_i + gy_i Y_i)) on every site; preserves the gauge."""
    for i in range(state.n):
        gx, gy = fields[i]
        if gx == 0.0 and gy == 0.0:
            continue
        u = _rotation_gate(gx, gy, t)
        state.tensors[i] = np.einsum("ab,lbr->lar", u, state.tensors[i])


def _bond_phases(coupling: float, dt: float) -> np.ndarray:
    """Diagonal of exp(-i J dt Z⊗Z) over the four two-spin basis states, shape (2, 2)."""
    zz = np.array([[1.0, -1.0], [-1.0, 1.0]])
    return np.exp(-1.0j * coupling * dt * zz)


def _split_truncate(theta: np.ndarray, d_max: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    """SVD-split a two-site block (Dl, 2, 2, Dr) with truncation.

    Returns the left isometry (Dl, 2, k), the new center tensor (k, 2, Dr),
    the relative discarded weight, and the pre-truncation norm of the block.
    The kept singular values are rescaled to unit total weight.
    """
    dl, _, _, dr = theta.shape
    m = theta.reshape(dl * 2, 2 * dr)
    try:
        u, s, vh = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        # rare LAPACK non-convergence; the QR-based driver is slower but robust
        import scipy.linalg

        u, s, vh = scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    w = s * s
    total = float(w.sum())
    keep = min(d_max, s.size)
    floor = TRUNCATION_FLOOR * total
    while keep > 1 and w[keep - 1] < floor:
        keep -= 1
    kept = float(w[:keep].sum())
    discarded = (total - kept) / total
    scale = np.sqrt(kept)
    left = u[:, :keep].reshape(dl, 2, keep)
    center = ((s[:keep, None] / scale) * vh[:keep]).reshape(keep, 2, dr)
    return left, center, discarded, float(np.sqrt(total))


def step(state: MpsState, chain: ChainSpec, frame: ControlFrame, dt: float) -> MpsState:
    """Advance by exp(-i H dt) with H the Ising chain plus the frame's fields.

    Symmetric splitting: half local rotations, one left-to-right sweep of the
    two-site coupling gates, half local rotations; per-step splitting error
    is O(dt^3).  Truncations are recorded on the returned state, which is
    renormalized and left with its canonical center at site 1.  The input
    state is not modified.
    """
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    if chain.n != state.n:
        raise ValueError("chain length does not match state")
    fields = frame.fields
    if fields.shape != (state.n, 2):
        raise ValueError("frame does not match state size")
    work = state.copy()
    work.ensure_center(0)
    _apply_local_rotations(work, fields, dt / 2.0)
    drift = 0.0
    for b in range(work.n - 1):
        # center sits at b; contract the pair and apply the diagonal coupling gate
        theta = np.tensordot(work.tensors[b], work.tensors[b + 1], axes=(2, 0))
        theta = theta * _bond_phases(chain.couplings[b], dt)[None, :, :, None]
        left, center, discarded, block_norm = _split_truncate(theta, work.d_max)
        work.tensors[b] = left
        work.tensors[b + 1] = center
        work.canonical_center = b + 1
        work.discarded_weight_total += discarded
        drift = max(drift, abs(block_norm - 1.0))
    _apply_local_rotations(work, fields, dt / 2.0)
    work.ensure_center(0)
    drift = max(drift, work.renormalize())
    work.last_step_norm_drift = drift
    return work


def rdm(state: MpsState, sites: list[int] | tuple[int, ...]) -> Rdm:
    """Reduced density matrix of 1-3 distinct sites (1-based, any spacing).

    Contracts a left-anchored environment in mixed-canonical form; exact, no
    extra truncation.  May move the state's gauge (physically a no-op).
    """
    sites = tuple(sorted(int(s) for s in sites))
    if not 1 <= len(sites) <= 3:
        raise ValueError(f"rdm supports 1 to 3 sites, got {len(sites)}")
    if len(set(sites)) != len(sites):
        raise ValueError(f"duplicate site in {sites}")
    if sites[0] < 1 or sites[-1] > state.n:
        raise ValueError(f"sites {sites} out of range 1..{state.n}")
    lo, hi = sites[0] - 1, sites[-1] - 1
    state.ensure_center(lo)
    keep = {s - 1 for s in sites}
    t = state.tensors[lo]
    env = np.einsum("lsa,ltb->stab", t, t.conj())  # (ket, bra, bond, bond')
    for i in range(lo + 1, hi + 1):
        t = state.tensors[i]
        tc = t.conj()
        if i in keep:
            tmp = np.tensordot(env, t, axes=(2, 0))  # (x, y, b, s, c)
            out = np.tensordot(tmp, tc, axes=(2, 0))  # (x, y, s, c, t, d)
            out = out.transpose(0, 2, 1, 4, 3, 5)  # (x, s, y, t, c, d)
            d_open = out.shape[0] * out.shape[1]
            env = out.reshape(d_open, d_open, out.shape[4], out.shape[5])
        else:
            env = _extend_env(env, t, tc)
    # everything right of `hi` is right-canonical, so close with the identity
    rho = np.trace(env, axis1=env.ndim - 2, axis2=env.ndim - 1)
    rho = 0.5 * (rho + rho.conj().T)
    return Rdm(sites=sites, matrix=rho)


def _extend_env(env: np.ndarray, t: np.ndarray, tc: np.ndarray) -> np.ndarray:
    """Absorb one site into an environment with trailing (ket bond, bra bond)."""
    k = env.ndim
    tmp = np.tensordot(env, t, axes=(k - 2, 0))  # (..., b, s, c)
    return np.tensordot(tmp, tc, axes=((k - 2, k - 1), (0, 1)))  # (..., c, d)


def pauli_expectation(state: MpsState, assignment: dict[int, int]) -> float:
    """Expectation of a Pauli string given as {site (1-based): index 0..3}.

    Index 0 is the identity, 1/2/3 are X/Y/Z; at most three entries may be
    non-identity.  Computed by full transfer contraction, independent of the
    state's gauge.
    """
    nontrivial = 0
    for site, op in assignment.items():
        if not 1 <= site <= state.n:
            raise ValueError(f"site {site} out of range 1..{state.n}")
        if op not in (0, 1, 2, 3):
            raise ValueError(f"invalid Pauli index {op}")
        if op != 0:
            nontrivial += 1
    if nontrivial > 3:
        raise ValueError("at most 3 non-identity Pauli factors are supported")
    env = np.ones((1, 1), dtype=complex)
    for i, t in enumerate(state.tensors):
        op = assignment.get(i + 1, 0)
        ket = t if op == 0 else np.einsum("ab,lbr->lar", PAULI[op], t)
        tmp = np.tensordot(env, t.conj(), axes=(0, 0))  # (l_ket, s, r*)
        env = np.tensordot(tmp, ket, axes=((0, 1), (0, 1)))  # (r*, r)
    val = complex(env[0, 0])
    if abs(val.imag) > 1e-10:
        raise ValueError(f"Pauli expectation has imaginary residue {val.imag:.3e}")
    return val.real


@dataclass(frozen=True)
class Snapshot:
    """All reduced density matrices the control loop reads each interval.

    singles[k] is the 2x2 matrix of site k+1; pairs_nn[k] the 4x4 matrix of
    sites (k+1, k+2); pairs_end[k] the 4x4 matrix of sites (1, k+2).
    """

    singles: np.ndarray  # (N, 2, 2)
    pairs_nn: np.ndarray  # (N-1, 4, 4)
    pairs_end: np.ndarray  # (N-1, 4, 4)


def snapshot(state: MpsState) -> Snapshot:
    """One-sweep extraction of singles, nearest-neighbour and (1, k) pairs."""
    n = state.n
    state.ensure_center(0)
    singles = np.empty((n, 2, 2), dtype=complex)
    pairs_nn = np.empty((n - 1, 4, 4), dtype=complex)
    pairs_end = np.empty((n - 1, 4, 4), dtype=complex)
    t0 = state.tensors[0]
    # open: site-1 physical legs kept open, bond legs trailing
    open_env = np.einsum("lsa,ltb->stab", t0, t0.conj())
    singles[0] = np.einsum("xyaa->xy", open_env)
    closed_prev = np.ones((1, 1), dtype=complex)  # left env excluding previous site
    closed = np.einsum("xxab->ab", open_env)  # left env through previous site
    prev = t0
    for k in range(1, n):
        t = state.tensors[k]
        tc = t.conj()
        # singles and (1, k+1) close with the identity: right side is right-canonical
        tmp = np.tensordot(closed, t, axes=(0, 0))  # (b, s, r)
        singles[k] = np.tensordot(tmp, tc, axes=((0, 2), (0, 2)))
        tmp = np.tensordot(open_env, t, axes=(2, 0))  # (x, y, b, s, r)
        pe = np.tensordot(tmp, tc, axes=((2, 4), (0, 2)))  # (x, y, s, t)
        pairs_end[k - 1] = pe.transpose(0, 2, 1, 3).reshape(4, 4)
        if k == 1:
            pairs_nn[0] = pairs_end[0]
        else:
            tmp = np.tensordot(closed_prev, prev, axes=(0, 0))  # (b, s, c)
            tmp = np.tensordot(tmp, prev.conj(), axes=(0, 0))  # (s, c, t, d)
            tmp = np.tensordot(tmp, t, axes=(1, 0))  # (s, t, d, u, r)
            pn = np.tensordot(tmp, tc, axes=((2, 4), (0, 2)))  # (s, t, u, v)
            pairs_nn[k - 1] = pn.transpose(0, 2, 1, 3).reshape(4, 4)
        if k < n - 1:
            closed_prev = closed
            closed = _extend_env(closed, t, tc)
            open_env = _extend_env(open_env, t, tc)
        prev = t
    return Snapshot(singles=singles, pairs_nn=pairs_nn, pairs_end=pairs_end)
