"""Online synthesis of local control pulses that create long-distance
entanglement in (disordered) Ising spin chains, with the chain state
propagated as a matrix product state."""

from .entanglement import TargetSpec, concurrence, purity_deficit, tau
from .model import (
    ChainSpec,
    ControlFrame,
    DisorderSpec,
    PulseSchedule,
    derive_seed,
    sample_ensemble,
    smooth_pulse,
    uniform_chain,
)
from .mps import MpsState, Rdm, from_product_state, pauli_expectation, plus_product, rdm, step

__all__ = [
    "ChainSpec",
    "ControlFrame",
    "DisorderSpec",
    "MpsState",
    "PulseSchedule",
    "Rdm",
    "TargetSpec",
    "concurrence",
    "derive_seed",
    "from_product_state",
    "pauli_expectation",
    "plus_product",
    "purity_deficit",
    "rdm",
    "sample_ensemble",
    "smooth_pulse",
    "step",
    "tau",
    "uniform_chain",
]
