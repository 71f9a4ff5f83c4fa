"""Experiment runner: single-chain and ensemble runs, pulse replay and
smoothing, oracle verification, and structured CSV/JSON outputs.

Configuration comes from an optional key=value text file plus command-line
overrides; every output file embeds the fully resolved configuration and all
seeds.  Subcommands: run, train, apply, smooth, verify.  The exit status is
nonzero when a configured threshold fails, so runs can gate CI jobs.

The worker-pool size for ensemble propagation is read from the environment
variable SPINCTRL_WORKERS (0 or unset means in-process serial execution);
results are bit-identical for any pool size.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import controller, mps, oracle
from .controller import RunResult, RunSettings
from .entanglement import TargetSpec, end_pair_concurrences
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

PULSE_HEADER = "spinctrl-pulse v1"
TRAJECTORY_HEADER = "spinctrl-trajectory v1"


@dataclass
class RunConfig:
    """Resolved configuration of one run/train/apply invocation."""

    n: int = 10
    d_max: int = 20
    beta: float = 70.0
    delta: float = 1e-3
    mu: float = 0.0
    alpha_weight: float = 1.0
    mask_policy: str = "full"
    tau_switch: float = 0.95
    stall_window: int = 200
    stall_eps: float = 1e-4
    time_cap: float | None = None
    seed_kick: bool = True
    couplings: list[float] | None = None
    disorder_lo: float | None = None
    disorder_hi: float | None = None
    seed: int = 1
    count: int = 1
    stride: int = 10
    min_peak: float | None = None

    def settings(self) -> RunSettings:
        return RunSettings(
            n=self.n,
            d_max=self.d_max,
            beta=self.beta,
            delta=self.delta,
            mu=self.mu,
            alpha_weight=self.alpha_weight,
            mask_policy=self.mask_policy,
            tau_switch=self.tau_switch,
            stall_window=self.stall_window,
            stall_eps=self.stall_eps,
            time_cap=self.time_cap,
            seed_kick=self.seed_kick,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def disorder_spec(self, seed: int | None = None, count: int | None = None) -> DisorderSpec:
        if self.disorder_lo is None or self.disorder_hi is None:
            raise ValueError("no disorder interval configured")
        return DisorderSpec(
            n=self.n,
            base=1.0,
            interval=(self.disorder_lo, self.disorder_hi),
            seed=self.seed if seed is None else seed,
            count=self.count if count is None else count,
        )

    def chains(self) -> list[ChainSpec]:
        """Chains this configuration describes (explicit, disordered, or uniform)."""
        if self.couplings is not None:
            return [ChainSpec(n=self.n, couplings=np.asarray(self.couplings))] * max(1, self.count)
        if self.disorder_lo is not None:
            return sample_ensemble(self.disorder_spec())
        return [uniform_chain(self.n)] * max(1, self.count)


_CONFIG_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    if name == "couplings":
        return [float(x) for x in raw.split(",") if x.strip()]
    if name in ("n", "d_max", "stall_window", "seed", "count", "stride"):
        return int(raw)
    if name in ("mask_policy",):
        return raw.strip()
    if name in ("seed_kick",):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return float(raw)


def load_config_file(path: str | Path) -> dict:
    """Parse a key=value config file ('#' starts a comment)."""
    values: dict = {}
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
        values[key] = None if raw.lower() == "none" else _coerce(key, raw)
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for name in _CONFIG_TYPES:
        arg = getattr(args, name, None)
        if arg is not None:
            values[name] = arg
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# File formats


def write_pulse(path: str | Path, schedule: PulseSchedule) -> None:
    """Pulse CSV: interval,t_start,site,g_x,g_y; zero-field entries omitted."""
    lines = [f"# {PULSE_HEADER}", f"# meta {json.dumps(_meta_for(schedule), sort_keys=True)}"]
    lines.append("interval,t_start,site,g_x,g_y")
    fields = schedule.fields
    for k in range(schedule.intervals):
        t_start = k * schedule.delta
        for site in range(schedule.n):
            gx, gy = fields[k, site]
            if gx == 0.0 and gy == 0.0:
                continue
            lines.append(f"{k},{t_start:.17g},{site + 1},{gx:.17g},{gy:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def _meta_for(schedule: PulseSchedule) -> dict:
    meta = dict(schedule.metadata)
    meta.update(
        {
            "n": schedule.n,
            "intervals": schedule.intervals,
            "delta": schedule.delta,
            "switch_times": list(schedule.switch_times),
        }
    )
    return meta


def read_pulse(path: str | Path) -> PulseSchedule:
    lines = Path(path).read_text().splitlines()
    if not lines or PULSE_HEADER not in lines[0]:
        raise ValueError(f"{path} is not a pulse file")
    meta = json.loads(lines[1].split("meta", 1)[1])
    n, intervals, delta = meta["n"], meta["intervals"], meta["delta"]
    fields = np.zeros((intervals, n, 2))
    for line in lines[3:]:
        if not line.strip():
            continue
        k, _, site, gx, gy = line.split(",")
        fields[int(k), int(site) - 1] = (float(gx), float(gy))
    switch_times = meta.pop("switch_times")
    for key in ("n", "intervals", "delta"):
        meta.pop(key)
    return PulseSchedule(fields=fields, delta=delta, switch_times=switch_times, metadata=meta)


def write_trajectory(path: str | Path, result: RunResult, config: RunConfig, stride: int) -> None:
    tr = result.trajectory
    n = config.n
    header = ["t", "target_j", "tau"] + [f"c_1_{k}" for k in range(2, n + 1)]
    header.append("discarded_weight")
    lines = [
        f"# {TRAJECTORY_HEADER}",
        f"# meta {json.dumps({'config': config.as_dict(), 'status': result.status}, sort_keys=True)}",
        ",".join(header),
    ]
    total = len(tr.times)
    for k in range(total):
        if k % stride and k != total - 1:
            continue
        row = [f"{tr.times[k]:.10g}", str(int(tr.target_j[k])), f"{tr.tau[k]:.10g}"]
        row += [f"{c:.10g}" for c in tr.concurrences[k]]
        row.append(f"{tr.discarded[k]:.6g}")
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(path: str | Path, result: RunResult, config: RunConfig) -> dict:
    n = config.n
    passed = result.status == "ok"
    if config.min_peak is not None:
        passed = passed and result.peaks[-1] >= config.min_peak
    summary = {
        "config": config.as_dict(),
        "status": result.status,
        "passed": bool(passed),
        "total_time": result.schedule.total_time,
        "switch_times": result.switch_times,
        "peaks": {f"c_1_{k + 2}": float(result.peaks[k]) for k in range(n - 1)},
        "peak_times": {f"c_1_{k + 2}": float(result.peak_times[k]) for k in range(n - 1)},
        "member_peaks": result.member_peaks.tolist(),
        "mean_final_discarded_weight": float(np.mean(result.final_discarded)),
        "thresholds": {"min_peak": config.min_peak},
    }
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _progress_printer(label: str):
    def progress(interval: int, t_now: float, j: int, tau_now: float, switched: bool) -> None:
        if switched:
            print(f"[{label}] t={t_now:.3f}  target (1,{j}) done, tau={tau_now:.4f}", file=sys.stderr)

    return progress


# ---------------------------------------------------------------------------
# Subcommands


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    config.count = 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains = config.chains()[:1]
    started = time.time()
    result = controller.run_control_protocol(
        chains, config.settings(), progress=_progress_printer("run")
    )
    result.schedule.metadata.update(config.as_dict())
    write_pulse(out / "pulse.csv", result.schedule)
    write_trajectory(out / "trajectory.csv", result, config, config.stride)
    summary = write_summary(out / "summary.json", result, config)
    print(
        f"status={result.status} peak c_1_{config.n}={result.peaks[-1]:.5f} "
        f"total={result.schedule.total_time:.3f}/J wall={time.time() - started:.0f}s"
    )
    return 0 if summary["passed"] else 1


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains = config.chains()
    started = time.time()
    result = controller.run_control_protocol(
        chains, config.settings(), progress=_progress_printer("train")
    )
    result.schedule.metadata.update(config.as_dict())
    write_pulse(out / "pulse.csv", result.schedule)
    write_trajectory(out / "trajectory.csv", result, config, config.stride)
    summary = write_summary(out / "summary.json", result, config)
    print(
        f"status={result.status} mean peak c_1_{config.n}={result.peaks[-1]:.5f} "
        f"({len(chains)} members) total={result.schedule.total_time:.3f}/J "
        f"wall={time.time() - started:.0f}s"
    )
    return 0 if summary["passed"] else 1


def cmd_apply(args: argparse.Namespace) -> int:
    schedule = read_pulse(args.pulse)
    meta = schedule.metadata
    values = {k: meta[k] for k in _CONFIG_TYPES if k in meta}
    config = RunConfig(**values)
    if args.seed is not None:
        config.seed = args.seed
    else:
        config.seed = derive_seed(config.seed, 1)  # default: sibling test ensemble
    if args.count is not None:
        config.count = args.count
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chains = config.chains()
    started = time.time()
    result = controller.replay_schedule(chains, schedule, config.settings())
    write_trajectory(out / "trajectory.csv", result, config, config.stride)
    summary = write_summary(out / "summary.json", result, config)
    print(
        f"replay: mean peak c_1_{config.n}={result.peaks[-1]:.5f} "
        f"({len(chains)} members) wall={time.time() - started:.0f}s"
    )
    return 0 if summary["passed"] else 1


def cmd_smooth(args: argparse.Namespace) -> int:
    schedule = read_pulse(args.pulse)
    smoothed = smooth_pulse(schedule, args.window)
    write_pulse(args.out, smoothed)
    print(f"smoothed {schedule.intervals} intervals with window {args.window} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Verification suite (dense-oracle cross checks)


def verify_oracle_protocol(n: int = 8, progress=None) -> dict:
    """Full protocol at exact bond dimension against the dense twin.

    The dense side applies the same per-interval splitting with each factor
    exact, so any observed deviation is tensor-network machinery (SVD
    truncation, canonical moves), not the splitting approximation.  Reduced
    density matrices of every 1/2/3-site subset are compared at checkpoints.
    """
    from itertools import combinations

    chain = uniform_chain(n)
    settings = RunSettings(n=n, d_max=2 ** (n // 2))
    state = mps.plus_product(n, settings.d_max)
    dense = oracle.dense_product([mps.PLUS] * n)
    sched = controller.SchedulerState(n=n, tau_switch=settings.tau_switch)
    worst_fid = 0.0
    worst_rdm = 0.0
    intervals = 0
    max_intervals = int(3.0 * n / settings.delta)
    subsets = [list(c) for m in (1, 2, 3) for c in combinations(range(1, n + 1), m)]
    while not sched.finished and intervals < max_intervals:
        snap = mps.snapshot(state)
        target = settings.target_for(sched.current_target_j)
        grad = controller.assemble_gradient(state, chain, target, snap=snap)
        frame = controller.optimal_fields(grad, settings.beta, settings.delta)
        if settings.seed_kick and intervals == 0 and not np.any(frame.fields):
            frame = ControlFrame(
                controller.seed_kick_fields(n, settings.beta), settings.delta
            )
        state = mps.step(state, chain, frame, settings.delta)
        dense = oracle.dense_split_step(dense, chain, frame, settings.delta)
        intervals += 1
        deficit = 1.0 - abs(np.vdot(dense.amplitudes, mps.to_statevector(state))) ** 2
        worst_fid = max(worst_fid, deficit)
        if intervals % 500 == 0 or sched.finished:
            for sites in subsets:
                dev = np.max(
                    np.abs(mps.rdm(state, sites).matrix - oracle.dense_rdm(dense, sites))
                )
                worst_rdm = max(worst_rdm, dev)
        tau_now = controller.tau_from_snapshot(mps.snapshot(state), target)
        sched, _ = controller.advance_scheduler(sched, tau_now)
        if progress is not None and intervals % 1000 == 0:
            progress(intervals, worst_fid, worst_rdm)
    return {
        "intervals": intervals,
        "worst_fidelity_deficit": worst_fid,
        "worst_rdm_deviation": worst_rdm,
        "fidelity_ok": worst_fid <= 1e-8,
        "rdm_ok": worst_rdm <= 1e-9,
    }


def verify_bond_convergence(n: int = 10, d_low: int = 10, d_high: int = 20) -> dict:
    """Train at the higher bond dimension, replay the pulse at both, compare.

    Replaying the same pulse isolates the truncation effect from scheduler
    timing; the reported number is the largest pointwise concurrence
    difference across all pairs (1, j) and all intervals.
    """
    chain = uniform_chain(n)
    settings_high = RunSettings(n=n, d_max=d_high)
    trained = controller.run_control_protocol([chain], settings_high)
    replay_low = controller.replay_schedule(
        [chain], trained.schedule, RunSettings(n=n, d_max=d_low)
    )
    dev = np.max(
        np.abs(trained.trajectory.concurrences - replay_low.trajectory.concurrences)
    )
    return {
        "d_low": d_low,
        "d_high": d_high,
        "max_concurrence_deviation": float(dev),
        "ok": bool(dev < 5e-3),
        "peak_high": float(trained.peaks[-1]),
        "peak_low": float(replay_low.peaks[-1]),
    }


def verify_gradient_collinearity(states: int = 100, dg: float = 0.25) -> dict:
    """Analytic gradient versus finite differences on random states (N=5, 6)."""
    worst_cos = 1.0
    for k in range(states):
        n = 5 if k % 2 == 0 else 6
        j = 2 + k % (n - 1)
        mu = 0.0 if k % 3 else 0.2
        rng = np.random.default_rng(1000 + k)
        chain = ChainSpec(n, rng.uniform(0.8, 1.2, n - 1))
        dense = oracle.random_dense(n, 2000 + k)
        state = mps.from_statevector(dense.amplitudes)
        target = TargetSpec.uniform(n, j, mu=mu)
        analytic = controller.assemble_gradient(state, chain, target).values
        fd = oracle.grad_fd_all(dense, chain, target, dg=dg)
        worst_cos = min(worst_cos, oracle.cosine_similarity(analytic, fd))
    return {"states": states, "worst_cosine": worst_cos, "ok": bool(worst_cos > 0.999)}


def cmd_verify(args: argparse.Namespace) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {}
    print("gradient collinearity ...", file=sys.stderr)
    report["gradient"] = verify_gradient_collinearity(states=args.states)
    print(f"  worst cosine {report['gradient']['worst_cosine']:.6f}", file=sys.stderr)
    print(f"oracle protocol N={args.n} ...", file=sys.stderr)
    report["oracle_protocol"] = verify_oracle_protocol(n=args.n)
    print(
        f"  fidelity deficit {report['oracle_protocol']['worst_fidelity_deficit']:.2e}, "
        f"rdm deviation {report['oracle_protocol']['worst_rdm_deviation']:.2e}",
        file=sys.stderr,
    )
    print("bond-dimension convergence ...", file=sys.stderr)
    report["bond_convergence"] = verify_bond_convergence()
    print(
        f"  max concurrence deviation {report['bond_convergence']['max_concurrence_deviation']:.2e}",
        file=sys.stderr,
    )
    ok = all(section.get("ok", section.get("fidelity_ok")) for section in report.values()) and (
        report["oracle_protocol"]["rdm_ok"]
    )
    report["passed"] = bool(ok)
    Path(out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--n", type=int)
    parser.add_argument("--d-max", dest="d_max", type=int)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--mu", type=float)
    parser.add_argument("--alpha-weight", dest="alpha_weight", type=float)
    parser.add_argument("--mask-policy", dest="mask_policy", choices=("full", "reduced"))
    parser.add_argument("--tau-switch", dest="tau_switch", type=float)
    parser.add_argument("--stall-window", dest="stall_window", type=int)
    parser.add_argument("--stall-eps", dest="stall_eps", type=float)
    parser.add_argument("--time-cap", dest="time_cap", type=float)
    parser.add_argument("--couplings", type=lambda s: [float(x) for x in s.split(",")])
    parser.add_argument("--disorder-lo", dest="disorder_lo", type=float)
    parser.add_argument("--disorder-hi", dest="disorder_hi", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--count", type=int)
    parser.add_argument("--stride", type=int)
    parser.add_argument("--min-peak", dest="min_peak", type=float)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="spinctrl",
        description="Entanglement control in Ising spin chains via curvature-based pulses",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="closed-loop control of a single chain")
    _add_config_flags(p_run)
    p_run.add_argument("--out", required=True)
    p_run.set_defaults(func=cmd_run)

    p_train = sub.add_parser("train", help="ensemble-averaged pulse synthesis")
    _add_config_flags(p_train)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_apply = sub.add_parser("apply", help="open-loop replay of a stored pulse")
    p_apply.add_argument("--pulse", required=True)
    p_apply.add_argument("--out", required=True)
    p_apply.add_argument("--seed", type=int, help="test-ensemble seed (default: derived)")
    p_apply.add_argument("--count", type=int)
    p_apply.set_defaults(func=cmd_apply)

    p_smooth = sub.add_parser("smooth", help="moving-average smoothing of a pulse file")
    p_smooth.add_argument("--pulse", required=True)
    p_smooth.add_argument("--out", required=True)
    p_smooth.add_argument("--window", type=int, default=5)
    p_smooth.set_defaults(func=cmd_smooth)

    p_verify = sub.add_parser("verify", help="dense-oracle cross checks")
    p_verify.add_argument("--n", type=int, default=8)
    p_verify.add_argument("--states", type=int, default=100)
    p_verify.add_argument("--out", required=True)
    p_verify.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
