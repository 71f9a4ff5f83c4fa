"""Online synthesis of the control fields from the curvature of the target.

The target functional is built from purity deficits, so its first time
derivative is blind to local fields; the controller instead maximizes the
second derivative, which is affine in the field amplitudes.  The gradient of
that curvature with respect to every (g_x, g_y) pair has a closed form in
terms of one-, two- and three-site Pauli expectation values; each interval
the fields are set parallel to the gradient with per-site magnitude pinned
to the cap.

The gradient splits into per-site purity blocks (site k's purity deficit
couples to fields on k-1, k, k+1 through the adjacent couplings) and, when
the pair-purity weight mu is nonzero, a pair block involving three-site
expectations around the target pair (1, j).  Couplings beyond the chain ends
are zero, which silently removes the corresponding groups at the boundaries.

A scheduler advances the target pair (1, j) -> (1, j+1) once the functional
saturates, producing the entanglement-swapping sequence; ensemble runs
average the gradient over disorder realizations and drive every member with
the one shared pulse.
"""

from __future__ import annotations

import multiprocessing
import os
from dataclasses import dataclass, field

import numpy as np

from . import mps
from .entanglement import TargetSpec, end_pair_concurrences, tau_from_snapshot
from .model import ChainSpec, ControlFrame, PulseSchedule
from .mps import MpsState, Snapshot

X, Y, Z = 0, 1, 2  # rows of the expectation arrays (identity excluded)
_AXIS_PAIRS = ((X, Y), (Y, X))  # (theta, phi) for the x and y field components

_P4 = np.stack(mps.PAULI)
_P2 = np.stack([np.kron(a, b) for a in mps.PAULI[1:] for b in mps.PAULI[1:]]).reshape(3, 3, 4, 4)

# Gradient norms below this floor produce zero fields instead of amplified noise.
GRADIENT_FLOOR = 1e-12

# The closed-form derivative groups carry block-dependent constants relative
# to the true curvature derivatives: finite differences show the single-site
# groups equal -1/4 of d(S'')/dg and the pair groups -1/2 of it, exactly.
# These factors restore a common positive scale before the blocks are mixed,
# which matters both for the ascent direction and for the relative weight of
# the pair term when mu > 0.
_SINGLE_BLOCK_CAL = -1.0
_PAIR_BLOCK_CAL = -0.5


@dataclass(frozen=True)
class FieldGradient:
    """d(curvature)/d(g) per site and axis, shape (N, 2); masked sites are zero."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ValueError(f"gradient must have shape (N, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("gradient has non-finite entries")

    def site_norms(self) -> np.ndarray:
        return np.hypot(self.values[:, 0], self.values[:, 1])


def _expectation_arrays(snap: Snapshot) -> tuple[np.ndarray, np.ndarray]:
    """Single-site (3, N) and nearest-neighbour (3, 3, N-1) Pauli expectations."""
    singles = np.einsum("aij,nji->an", _P4[1:], snap.singles).real
    pairs = np.einsum("abij,nji->abn", _P2, snap.pairs_nn).real
    return singles, pairs


def _single_blocks(
    s: np.ndarray, c: np.ndarray, couplings: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Purity-curvature derivative groups of every site's own purity deficit.

    Returns (own, right, left): block k's derivative with respect to the
    fields on site k, k+1 and k-1 respectively, each of shape (N, 2).
    """
    n = s.shape[1]
    jm = np.zeros(n)
    jm[1:] = couplings  # coupling to the left neighbour
    jp = np.zeros(n)
    jp[:-1] = couplings  # coupling to the right neighbour

    def at_left(bond_vals: np.ndarray) -> np.ndarray:
        out = np.zeros(n)
        out[1:] = bond_vals
        return out

    def at_right(bond_vals: np.ndarray) -> np.ndarray:
        out = np.zeros(n)
        out[:-1] = bond_vals
        return out

    own = np.zeros((n, 2))
    right = np.zeros((n, 2))
    left = np.zeros((n, 2))
    for ax, (th, ph) in enumerate(_AXIS_PAIRS):
        own[:, ax] = jm * (s[th] * at_left(c[Z, Z]) - s[Z] * at_left(c[Z, th])) + jp * (
            s[th] * at_right(c[Z, Z]) - s[Z] * at_right(c[th, Z])
        )
        right[:, ax] = jp * (s[ph] * at_right(c[th, ph]) - s[th] * at_right(c[ph, ph]))
        left[:, ax] = jm * (s[ph] * at_left(c[ph, th]) - s[th] * at_left(c[ph, ph]))
    return own, right, left


def _accumulate_single_blocks(
    weights: np.ndarray, s: np.ndarray, c: np.ndarray, couplings: np.ndarray
) -> np.ndarray:
    """Weighted sum of all single-site blocks, shape (N, 2)."""
    own, right, left = _single_blocks(s, c, couplings)
    w = weights[:, None]
    grad = w * own
    grad[1:] += (w * right)[:-1]
    grad[:-1] += (w * left)[1:]
    return grad


def grad_purity_curvature_single(state: MpsState, chain: ChainSpec, site: int) -> FieldGradient:
    """Gradient of the curvature of site `site`'s purity deficit (1-based)."""
    if not 1 <= site <= state.n:
        raise ValueError(f"site {site} out of range 1..{state.n}")
    snap = mps.snapshot(state)
    s, c = _expectation_arrays(snap)
    weights = np.zeros(state.n)
    weights[site - 1] = 1.0
    return FieldGradient(_accumulate_single_blocks(weights, s, c, chain.couplings))


def _pauli_table2(rho: np.ndarray) -> np.ndarray:
    """tr(sigma_a x sigma_b rho) over a, b in {I, X, Y, Z}; shape (4, 4)."""
    r = rho.reshape(2, 2, 2, 2)
    return np.einsum("aij,bkl,jlik->ab", _P4, _P4, r, optimize=True).real


def _pauli_table3(rho: np.ndarray) -> np.ndarray:
    """tr(sigma_a x sigma_b x sigma_c rho); shape (4, 4, 4)."""
    r = rho.reshape(2, 2, 2, 2, 2, 2)
    return np.einsum("aij,bkl,cmn,jlnikm->abc", _P4, _P4, _P4, r, optimize=True).real


def grad_purity_curvature_pair(state: MpsState, chain: ChainSpec, j: int) -> FieldGradient:
    """Gradient of the curvature of the pair (1, j) purity deficit.

    Only the couplings crossing the pair's boundary contribute: for j = 2
    that is the single bond to site 3 (the derivative with respect to the
    fields on site 1 vanishes identically); for j > 2 the bonds (1,2),
    (j-1,j) and (j,j+1).  The sums run over a full Pauli basis (identity
    included) on the spectator end of the pair.
    """
    n = state.n
    if not 2 <= j <= n:
        raise ValueError(f"target site {j} out of range 2..{n}")
    tx, ty, tz = 1, 2, 3  # Pauli-table indices (0 is the identity)
    out = np.zeros((n, 2))
    if j == 2:
        j2 = chain.coupling(2)
        if j2 == 0.0:
            return FieldGradient(out)
        t2 = _pauli_table2(mps.rdm(state, [1, 2]).matrix)
        t3 = _pauli_table3(mps.rdm(state, [1, 2, 3]).matrix)
        for ax, (th, ph) in enumerate(((tx, ty), (ty, tx))):
            out[1, ax] += j2 * (t2[:, th] @ t3[:, tz, tz] - t2[:, tz] @ t3[:, th, tz])
            out[2, ax] += j2 * (t2[:, ph] @ t3[:, th, ph] - t2[:, th] @ t3[:, ph, ph])
        return FieldGradient(out)
    j1 = chain.coupling(1)
    jjm = chain.coupling(j - 1)
    jj = chain.coupling(j)
    t2 = _pauli_table2(mps.rdm(state, [1, j]).matrix)
    t3a = _pauli_table3(mps.rdm(state, [1, 2, j]).matrix)
    t3m = _pauli_table3(mps.rdm(state, [1, j - 1, j]).matrix)
    t3p = _pauli_table3(mps.rdm(state, [1, j, j + 1]).matrix) if j < n else None
    for ax, (th, ph) in enumerate(((tx, ty), (ty, tx))):
        out[0, ax] += j1 * (t2[th] @ t3a[tz, tz] - t2[tz] @ t3a[th, tz])
        out[1, ax] += j1 * (t2[ph] @ t3a[th, ph] - t2[th] @ t3a[ph, ph])
        out[j - 1, ax] += jjm * (t2[:, th] @ t3m[:, tz, tz] - t2[:, tz] @ t3m[:, tz, th])
        out[j - 2, ax] += jjm * (t2[:, ph] @ t3m[:, ph, th] - t2[:, th] @ t3m[:, ph, ph])
        if t3p is not None:
            out[j - 1, ax] += jj * (t2[:, th] @ t3p[:, tz, tz] - t2[:, tz] @ t3p[:, th, tz])
            out[j, ax] += jj * (t2[:, ph] @ t3p[:, th, ph] - t2[:, th] @ t3p[:, ph, ph])
    return FieldGradient(out)


def assemble_gradient(
    state: MpsState,
    chain: ChainSpec,
    target: TargetSpec,
    mask: frozenset[int] | set[int] | None = None,
    snap: Snapshot | None = None,
) -> FieldGradient:
    """Full curvature gradient of the target functional at the current state.

    Accumulates (+1) x the blocks of both pair sites, (-alpha_k) x every
    penalized site's block and, for mu > 0, (-mu) x the pair block, then
    zeroes all components outside `mask` (None means every site is active).
    """
    a, b = target.pair
    if a != 1:
        raise ValueError("gradient synthesis requires target pair (1, j)")
    if snap is None:
        snap = mps.snapshot(state)
    s, c = _expectation_arrays(snap)
    weights = -target.alpha.copy()
    weights[a - 1] = 1.0
    weights[b - 1] = 1.0
    grad = _SINGLE_BLOCK_CAL * _accumulate_single_blocks(weights, s, c, chain.couplings)
    if target.mu != 0.0:
        grad -= target.mu * _PAIR_BLOCK_CAL * grad_purity_curvature_pair(state, chain, b).values
    if mask is not None:
        active = np.zeros(state.n, dtype=bool)
        active[[site - 1 for site in mask]] = True
        grad[~active] = 0.0
    return FieldGradient(grad)


def optimal_fields(
    grad: FieldGradient, beta: float, duration: float, floor: float = GRADIENT_FLOOR
) -> ControlFrame:
    """Fields parallel to the gradient, rescaled to magnitude beta per site.

    Sites whose gradient norm is below `floor` get exactly zero field, so the
    chain evolves freely until correlations build up a usable gradient.
    """
    if beta <= 0.0:
        raise ValueError(f"beta must be positive, got {beta}")
    norms = grad.site_norms()
    fields = np.zeros_like(grad.values)
    active = norms > floor
    fields[active] = beta * grad.values[active] / norms[active, None]
    return ControlFrame(fields=fields, duration=duration)


def reduced_mask(j: int, n: int) -> frozenset[int]:
    """Active control sites for a reduced-control run: site 1 plus j-2..j+2."""
    if not 2 <= j <= n:
        raise ValueError(f"target site {j} out of range 2..{n}")
    return frozenset({1} | {k for k in range(j - 2, j + 3) if 1 <= k <= n})


def seed_kick_fields(n: int, beta: float, mask: frozenset[int] | None = None) -> np.ndarray:
    """Deterministic full-amplitude frame used once when the gradient is dead.

    The all-spins-along-x start shares a spin-flip parity with the Ising
    couplings under which every y- and z-odd expectation vanishes, and the
    coupling evolution conserves all z-strings; together these pin the
    curvature gradient to exactly zero along the free orbit, so the control
    rule alone never engages.  One interval of fixed symmetry-breaking
    rotations (golden-angle directions, distinct per site) seeds the
    correlations the gradient needs; being deterministic, it is recorded in
    the pulse like any other frame and replays identically.
    """
    golden = np.pi * (3.0 - np.sqrt(5.0))
    angles = golden * (1.0 + np.arange(n))
    fields = beta * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    if mask is not None:
        active = np.zeros(n, dtype=bool)
        active[[site - 1 for site in mask]] = True
        fields[~active] = 0.0
    return fields


@dataclass
class SchedulerState:
    """Decides when the target pair advances from (1, j) to (1, j+1).

    Intermediate targets are abandoned once the functional crosses
    `tau_switch` or stops improving; the final target (1, N) always runs to
    saturation (the stall rule), so the last swap is not cut short.  The
    terminating stall of the final era counts as the last switch, giving
    exactly N-1 switch events in a completed run.
    """

    n: int
    tau_switch: float = 0.95
    window: int = 200
    eps_sat: float = 1e-4
    current_target_j: int = 2
    interval_index: int = 0
    era_start: int = 0
    best_tau: float = -np.inf
    last_improve: int = 0
    switch_indices: list[int] = field(default_factory=list)
    finished: bool = False

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError("scheduler needs at least 2 sites")
        if self.window < 1:
            raise ValueError("window must be >= 1")


def advance_scheduler(sched: SchedulerState, tau_now: float) -> tuple[SchedulerState, bool]:
    """Feed one interval's functional value; returns (scheduler, switched)."""
    if not np.isfinite(tau_now):
        raise ValueError(f"non-finite target value {tau_now}")
    if sched.finished:
        return sched, False
    sched.interval_index += 1
    margin = sched.eps_sat * max(abs(sched.best_tau), 1e-2)
    if tau_now > sched.best_tau + margin:
        sched.best_tau = tau_now
        sched.last_improve = sched.interval_index
    elif tau_now > sched.best_tau:
        sched.best_tau = tau_now
    stalled = sched.interval_index - max(sched.last_improve, sched.era_start) >= sched.window
    threshold = sched.current_target_j < sched.n and tau_now >= sched.tau_switch
    if not (stalled or threshold):
        return sched, False
    sched.switch_indices.append(sched.interval_index)
    if sched.current_target_j < sched.n:
        sched.current_target_j += 1
        sched.era_start = sched.interval_index
        sched.last_improve = sched.interval_index
        sched.best_tau = -np.inf
    else:
        sched.finished = True
    return sched, True


@dataclass(frozen=True)
class RunSettings:
    """Physics and scheduling parameters of one control run."""

    n: int
    d_max: int = 20
    beta: float = 70.0
    delta: float = 1e-3
    mu: float = 0.0
    alpha_weight: float = 1.0
    mask_policy: str = "full"  # "full" or "reduced"
    tau_switch: float = 0.95
    stall_window: int = 200
    stall_eps: float = 1e-4
    time_cap: float | None = None
    seed_kick: bool = True

    def __post_init__(self) -> None:
        if self.n < 2 or self.d_max < 1 or self.beta <= 0 or self.delta <= 0:
            raise ValueError("invalid run settings")
        if self.mask_policy not in ("full", "reduced"):
            raise ValueError(f"unknown mask policy {self.mask_policy!r}")

    @property
    def effective_time_cap(self) -> float:
        return self.time_cap if self.time_cap is not None else 3.0 * self.n

    def target_for(self, j: int) -> TargetSpec:
        if self.mask_policy == "reduced":
            return TargetSpec.masked(
                self.n, j, set(reduced_mask(j, self.n)), mu=self.mu, weight=self.alpha_weight
            )
        return TargetSpec.uniform(self.n, j, mu=self.mu, weight=self.alpha_weight)

    def control_mask(self, j: int) -> frozenset[int] | None:
        if self.mask_policy == "reduced":
            return reduced_mask(j, self.n)
        return None


def ensemble_control_step(
    states: list[MpsState],
    chains: list[ChainSpec],
    target: TargetSpec,
    mask: frozenset[int] | None,
    beta: float,
    dt: float,
) -> tuple[list[MpsState], ControlFrame]:
    """One shared control interval for an ensemble of chains.

    Member gradients are averaged in member order, one frame is synthesized
    from the mean, and that frame is applied to every member.
    """
    if len(states) != len(chains):
        raise ValueError("states and chains must pair up")
    grads = np.stack(
        [assemble_gradient(s, c, target, mask).values for s, c in zip(states, chains)]
    )
    frame = optimal_fields(FieldGradient(grads.mean(axis=0)), beta, dt)
    return [mps.step(s, c, frame, dt) for s, c in zip(states, chains)], frame


# ---------------------------------------------------------------------------
# Run loop


@dataclass
class Trajectory:
    """Per-interval record of an executed run (ensemble means for ensembles)."""

    times: np.ndarray  # (T,)
    target_j: np.ndarray  # (T,) int
    tau: np.ndarray  # (T,)
    concurrences: np.ndarray  # (T, N-1), column k is the pair (1, k+2)
    discarded: np.ndarray  # (T,)


@dataclass
class RunResult:
    schedule: PulseSchedule
    trajectory: Trajectory
    status: str  # "ok" or "time_cap"
    peaks: np.ndarray  # (N-1,) peak of the mean concurrence per pair (1, k)
    peak_times: np.ndarray  # (N-1,)
    member_peaks: np.ndarray  # (M, N-1) per-member peak concurrences
    final_discarded: np.ndarray  # (M,)

    @property
    def switch_times(self) -> list[float]:
        return list(self.schedule.switch_times)


class _Members:
    """Serial ensemble backend: owns states, computes gradients and stats."""

    def __init__(self, chains: list[ChainSpec], settings: RunSettings):
        self.chains = chains
        self.settings = settings
        self.states = [mps.plus_product(settings.n, settings.d_max) for _ in chains]
        self.snaps: list[Snapshot] = [mps.snapshot(s) for s in self.states]

    def gradients(self, j: int) -> np.ndarray:
        target = self.settings.target_for(j)
        mask = self.settings.control_mask(j)
        return np.stack(
            [
                assemble_gradient(s, c, target, mask, snap=snap).values
                for s, c, snap in zip(self.states, self.chains, self.snaps)
            ]
        )

    def step_and_measure(self, fields: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        frame = ControlFrame(fields=fields, duration=self.settings.delta)
        target = self.settings.target_for(j)
        taus = np.empty(len(self.states))
        concs = np.empty((len(self.states), self.settings.n - 1))
        dws = np.empty(len(self.states))
        for m, (state, chain) in enumerate(zip(self.states, self.chains)):
            state = mps.step(state, chain, frame, self.settings.delta)
            snap = mps.snapshot(state)
            self.states[m] = state
            self.snaps[m] = snap
            taus[m] = tau_from_snapshot(snap, target)
            concs[m] = end_pair_concurrences(snap)
            dws[m] = state.discarded_weight_total
        return taus, concs, dws

    def close(self) -> None:
        pass


def _worker_main(conn, chains: list[ChainSpec], settings: RunSettings) -> None:
    members = _Members(chains, settings)
    while True:
        msg = conn.recv()
        kind = msg[0]
        if kind == "grads":
            conn.send(members.gradients(msg[1]))
        elif kind == "advance":
            conn.send(members.step_and_measure(msg[1], msg[2]))
        elif kind == "stop":
            conn.close()
            return


class _WorkerPool:
    """Process-pool ensemble backend; members are sharded contiguously.

    Results are concatenated in shard order, which preserves the global
    member order, so gradient averages are bit-identical to the serial
    backend for any worker count.
    """

    def __init__(self, chains: list[ChainSpec], settings: RunSettings, workers: int):
        self.shard_sizes = [len(s) for s in np.array_split(np.arange(len(chains)), workers)]
        self.conns = []
        self.procs = []
        start = 0
        ctx = multiprocessing.get_context("fork")
        for size in self.shard_sizes:
            if size == 0:
                continue
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=_worker_main,
                args=(child, chains[start : start + size], settings),
                daemon=True,
            )
            proc.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(proc)
            start += size

    def gradients(self, j: int) -> np.ndarray:
        for conn in self.conns:
            conn.send(("grads", j))
        return np.concatenate([conn.recv() for conn in self.conns])

    def step_and_measure(self, fields: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        for conn in self.conns:
            conn.send(("advance", fields, j))
        parts = [conn.recv() for conn in self.conns]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))

    def close(self) -> None:
        for conn in self.conns:
            try:
                conn.send(("stop",))
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for proc in self.procs:
            proc.join(timeout=10)


def _make_backend(chains: list[ChainSpec], settings: RunSettings, workers: int | None):
    if workers is None:
        workers = int(os.environ.get("SPINCTRL_WORKERS", "0"))
    workers = min(workers, len(chains))
    if workers >= 2 and len(chains) >= 2:
        return _WorkerPool(chains, settings, workers)
    return _Members(chains, settings)


def run_control_protocol(
    chains: list[ChainSpec],
    settings: RunSettings,
    workers: int | None = None,
    progress=None,
) -> RunResult:
    """Closed-loop run: synthesize and apply the pulse, era by era.

    For a single chain this is plain time-local control; for several chains
    the shared frame comes from the member-ordered mean gradient and the
    scheduler is driven by the ensemble-mean functional value.
    """
    for chain in chains:
        if chain.n != settings.n:
            raise ValueError("chain length does not match settings")
    backend = _make_backend(chains, settings, workers)
    try:
        return _drive(backend, chains, settings, progress)
    finally:
        backend.close()


def _drive(backend, chains, settings: RunSettings, progress) -> RunResult:
    n = settings.n
    m = len(chains)
    sched = SchedulerState(
        n=n,
        tau_switch=settings.tau_switch,
        window=settings.stall_window,
        eps_sat=settings.stall_eps,
    )
    max_intervals = int(np.ceil(settings.effective_time_cap / settings.delta))
    frames: list[np.ndarray] = []
    times, targets, tau_trace, conc_trace, dw_trace = [], [], [], [], []
    peaks = np.zeros(n - 1)
    peak_times = np.zeros(n - 1)
    member_peaks = np.zeros((m, n - 1))
    dws = np.zeros(m)
    status = "ok"
    grads = backend.gradients(sched.current_target_j)
    while not sched.finished:
        if len(frames) >= max_intervals:
            status = "time_cap"
            break
        j = sched.current_target_j
        frame_fields = optimal_fields(
            FieldGradient(grads.mean(axis=0)), settings.beta, settings.delta
        ).fields
        if settings.seed_kick and not np.any(frame_fields) and not any(
            np.any(f) for f in frames
        ):
            frame_fields = seed_kick_fields(n, settings.beta, settings.control_mask(j))
        taus, concs, dws = backend.step_and_measure(frame_fields, j)
        frames.append(frame_fields)
        t_now = len(frames) * settings.delta
        mean_tau = float(taus.mean())
        mean_concs = concs.mean(axis=0)
        times.append(t_now)
        targets.append(j)
        tau_trace.append(mean_tau)
        conc_trace.append(mean_concs)
        dw_trace.append(float(dws.mean()))
        new_peak = mean_concs > peaks
        peak_times[new_peak] = t_now
        peaks[new_peak] = mean_concs[new_peak]
        np.maximum(member_peaks, concs, out=member_peaks)
        sched, switched = advance_scheduler(sched, mean_tau)
        if progress is not None and (switched or len(frames) % 1000 == 0):
            progress(len(frames), t_now, j, mean_tau, switched)
        grads = backend.gradients(sched.current_target_j)
    schedule = PulseSchedule(
        fields=np.array(frames) if frames else np.zeros((0, n, 2)),
        delta=settings.delta,
        switch_times=[i * settings.delta for i in sched.switch_indices],
        metadata={},
    )
    trajectory = Trajectory(
        times=np.array(times),
        target_j=np.array(targets, dtype=int),
        tau=np.array(tau_trace),
        concurrences=np.array(conc_trace) if conc_trace else np.zeros((0, n - 1)),
        discarded=np.array(dw_trace),
    )
    return RunResult(
        schedule=schedule,
        trajectory=trajectory,
        status=status,
        peaks=peaks,
        peak_times=peak_times,
        member_peaks=member_peaks,
        final_discarded=dws,
    )


def replay_schedule(
    chains: list[ChainSpec],
    schedule: PulseSchedule,
    settings: RunSettings,
    workers: int | None = None,
    progress=None,
) -> RunResult:
    """Open-loop application of a stored pulse; no gradients are evaluated."""
    for chain in chains:
        if chain.n != schedule.n or chain.n != settings.n:
            raise ValueError("chain length does not match the pulse")
    backend = _make_backend(chains, settings, workers)
    n = settings.n
    m = len(chains)
    times, targets, tau_trace, conc_trace, dw_trace = [], [], [], [], []
    peaks = np.zeros(n - 1)
    peak_times = np.zeros(n - 1)
    member_peaks = np.zeros((m, n - 1))
    dws = np.zeros(m)
    try:
        for k in range(schedule.intervals):
            j = schedule.target_at(k)
            taus, concs, dws = backend.step_and_measure(schedule.fields[k], j)
            t_now = (k + 1) * schedule.delta
            mean_concs = concs.mean(axis=0)
            times.append(t_now)
            targets.append(j)
            tau_trace.append(float(taus.mean()))
            conc_trace.append(mean_concs)
            dw_trace.append(float(dws.mean()))
            new_peak = mean_concs > peaks
            peak_times[new_peak] = t_now
            peaks[new_peak] = mean_concs[new_peak]
            np.maximum(member_peaks, concs, out=member_peaks)
            if progress is not None and k % 1000 == 0:
                progress(k, t_now, j, tau_trace[-1], False)
    finally:
        backend.close()
    trajectory = Trajectory(
        times=np.array(times),
        target_j=np.array(targets, dtype=int),
        tau=np.array(tau_trace),
        concurrences=np.array(conc_trace) if conc_trace else np.zeros((0, n - 1)),
        discarded=np.array(dw_trace),
    )
    return RunResult(
        schedule=schedule,
        trajectory=trajectory,
        status="ok",
        peaks=peaks,
        peak_times=peak_times,
        member_peaks=member_peaks,
        final_discarded=dws,
    )
