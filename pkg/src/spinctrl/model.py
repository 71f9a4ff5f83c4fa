"""Chain definitions, disorder ensembles, and control-pulse containers.

Units: hbar = 1, energies in units of the nominal coupling J, times in 1/J.
With these conventions the standard protocol parameters are pure numbers
(field cap 70, interval length 1e-3).

Disorder sampling uses a pinned splitmix64/xoshiro256** generator implemented
here so that ensembles are bit-identical across platforms and library
versions.  Each ensemble member draws from its own sub-stream derived from
the master seed, so ensembles are stable under changes of member count order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 update; returns (next_state, output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Deterministic sub-seed `index` of a master seed (e.g. train=0, test=1)."""
    state = (seed ^ (index * _GOLDEN)) & _MASK64
    _, out = _splitmix64(state)
    return out


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Xoshiro256StarStar:
    """xoshiro256** stream seeded through splitmix64.

    Small, documented shift/rotate generator used only for disorder sampling;
    not a replacement for numpy's generators elsewhere.
    """

    def __init__(self, seed: int):
        state = seed & _MASK64
        self.s = []
        for _ in range(4):
            state, out = _splitmix64(state)
            self.s.append(out)

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform double in [lo, hi) from the top 53 bits."""
        u = self.next_u64() >> 11
        return lo + (hi - lo) * (u * (1.0 / (1 << 53)))


@dataclass(frozen=True)
class ChainSpec:
    """Open chain of n spins with n-1 nearest-neighbour couplings.

    couplings[i] couples sites i+1 and i+2 (1-based sites); the boundary
    couplings beyond the chain are implicitly zero.
    """

    n: int
    couplings: np.ndarray

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"chain needs at least 2 spins, got {self.n}")
        c = np.asarray(self.couplings, dtype=float)
        object.__setattr__(self, "couplings", c)
        if c.shape != (self.n - 1,):
            raise ValueError(f"expected {self.n - 1} couplings, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("couplings must be finite")

    def coupling(self, bond: int) -> float:
        """Coupling of 1-based bond index (bond i joins sites i and i+1); 0 off-chain."""
        if 1 <= bond <= self.n - 1:
            return float(self.couplings[bond - 1])
        return 0.0


def uniform_chain(n: int, j: float = 1.0) -> ChainSpec:
    """Ordered chain with all couplings equal to j."""
    return ChainSpec(n=n, couplings=np.full(n - 1, j))


@dataclass(frozen=True)
class DisorderSpec:
    """Ensemble of chains with couplings r_i * base, r_i uniform on [lo, hi]."""

    n: int
    base: float
    interval: tuple[float, float]
    seed: int
    count: int

    def __post_init__(self) -> None:
        lo, hi = self.interval
        if not 0 < lo <= hi:
            raise ValueError(f"invalid disorder interval [{lo}, {hi}]")
        if self.count < 1:
            raise ValueError(f"ensemble size must be >= 1, got {self.count}")


def sample_ensemble(spec: DisorderSpec) -> list[ChainSpec]:
    """Draw `count` chains, each coupling independently uniform on [lo, hi]*base.

    Member m uses sub-stream m of the master seed, so the ensemble is
    reproducible bit-for-bit and prefixes agree across different counts.
    """
    lo, hi = spec.interval
    chains = []
    for member in range(spec.count):
        rng = Xoshiro256StarStar(derive_seed(spec.seed, member))
        couplings = np.array(
            [rng.uniform(lo, hi) * spec.base for _ in range(spec.n - 1)]
        )
        chains.append(ChainSpec(n=spec.n, couplings=couplings))
    return chains


@dataclass(frozen=True)
class ControlFrame:
    """Per-site (g_x, g_y) field pair, constant over one interval of `duration`."""

    fields: np.ndarray  # (N, 2)
    duration: float

    def __post_init__(self) -> None:
        f = np.asarray(self.fields, dtype=float)
        object.__setattr__(self, "fields", f)
        if f.ndim != 2 or f.shape[1] != 2:
            raise ValueError(f"fields must have shape (N, 2), got {f.shape}")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")

    @property
    def n(self) -> int:
        return self.fields.shape[0]

    def magnitudes(self) -> np.ndarray:
        return np.hypot(self.fields[:, 0], self.fields[:, 1])


def zero_frame(n: int, duration: float) -> ControlFrame:
    return ControlFrame(fields=np.zeros((n, 2)), duration=duration)


@dataclass
class PulseSchedule:
    """Trained control pulse: per-interval fields plus target-switch times.

    fields[t, i] holds (g_x, g_y) of site i+1 during interval t; interval t
    covers times [t*delta, (t+1)*delta).  switch_times records when the
    target pair advanced, in units of 1/J, and has one entry per completed
    swap (the last entry is the end of the run).  metadata carries the
    resolved run configuration and seeds.
    """

    fields: np.ndarray  # (T, N, 2)
    delta: float
    switch_times: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        f = np.asarray(self.fields, dtype=float)
        if f.ndim != 3 or f.shape[2] != 2:
            raise ValueError(f"fields must have shape (T, N, 2), got {f.shape}")
        self.fields = f
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if any(b <= a for a, b in zip(self.switch_times, self.switch_times[1:])):
            raise ValueError("switch_times must be strictly increasing")

    @property
    def intervals(self) -> int:
        return self.fields.shape[0]

    @property
    def n(self) -> int:
        return self.fields.shape[1]

    @property
    def total_time(self) -> float:
        return self.intervals * self.delta

    def frame(self, index: int) -> ControlFrame:
        return ControlFrame(fields=self.fields[index], duration=self.delta)

    def target_at(self, interval: int) -> int:
        """Target pair partner j active during the given interval."""
        t = (interval + 1) * self.delta
        j = 2
        for s in self.switch_times[:-1]:
            if t > s + 0.5 * self.delta:
                j += 1
        return j


def smooth_pulse(schedule: PulseSchedule, window: int) -> PulseSchedule:
    """Centered moving average of every field component over `window` intervals.

    The window shrinks near the edges.  The amplitude cap is deliberately not
    re-imposed, so smoothed fields may exceed it.  Switch times and metadata
    are preserved; the smoothing window is recorded in the metadata.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    t = schedule.intervals
    half = window // 2
    flat = schedule.fields.reshape(t, -1)
    csum = np.vstack([np.zeros((1, flat.shape[1])), np.cumsum(flat, axis=0)])
    idx = np.arange(t)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, t)
    sums = csum[hi] - csum[lo]
    counts = (hi - lo).astype(float)[:, None]
    smoothed = (sums / counts).reshape(schedule.fields.shape)
    meta = dict(schedule.metadata)
    meta["smoothing_window"] = window
    return PulseSchedule(
        fields=smoothed,
        delta=schedule.delta,
        switch_times=list(schedule.switch_times),
        metadata=meta,
    )
