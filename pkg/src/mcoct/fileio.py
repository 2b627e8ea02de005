"""CSV readers and writers for pulses, dynamics and run records.

Floats are written with 17 significant digits so that float64 values
round-trip exactly through text.  All writers emit LF newlines and a
fixed column order, so repeated runs with the same seed produce
byte-identical files (convergence files carry wall-clock times in their
last column and are the documented exception).
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analysis import DynamicsRecord, PowerLawFit
from .errors import ConfigError, DimensionMismatchError
from .krotov import IterationRecord
from .network import ControlField, NetworkSpec
from .propagate import EnsembleResult, Jump

__all__ = [
    "fmt",
    "save_pulse",
    "load_pulse",
    "write_convergence_csv",
    "write_dynamics_csv",
    "write_jumps_csv",
    "write_states_csv",
    "write_noise_csv",
    "write_noise_fit_csv",
]


def fmt(x: float) -> str:
    """Format a float with enough digits to round-trip exactly."""
    return f"{float(x):.17g}"


def save_pulse(pulse: ControlField, path: str | Path,
               config_hash: str = "unknown") -> None:
    """Write one control pulse as CSV with a comment header.

    Rows hold the interval midpoint time and the pulse value there; the
    row count equals the number of time steps.
    """
    path = Path(path)
    n = len(pulse.values)
    dt = pulse.duration / n
    mids = (np.arange(n) + 0.5) * dt
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write(f"# node_index: {pulse.node_index}\n")
        handle.write("# units: time in 1/g, amplitude in g (hbar = 1)\n")
        handle.write("t_midpoint,omega\n")
        for t, v in zip(mids, pulse.values):
            handle.write(f"{fmt(t)},{fmt(v)}\n")


def load_pulse(path: str | Path,
               spec: NetworkSpec | None = None) -> ControlField:
    """Read a pulse file written by :func:`save_pulse`.

    When ``spec`` is given the row count and time grid are checked
    against it and a mismatch raises :class:`DimensionMismatchError`
    naming the expected and found values.
    """
    path = Path(path)
    node_index = None
    times: list[float] = []
    values: list[float] = []
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read pulse file {path}: {err}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            body = stripped.lstrip("#").strip()
            if body.startswith("node_index:"):
                node_index = int(body.partition(":")[2].strip())
            continue
        if stripped.startswith("t_midpoint"):
            continue
        parts = stripped.split(",")
        if len(parts) != 2:
            raise ConfigError(
                f"{path}:{lineno}: expected 't,omega', got {stripped!r}"
            )
        try:
            times.append(float(parts[0]))
            values.append(float(parts[1]))
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from None
    if node_index is None:
        raise ConfigError(f"{path}: missing '# node_index:' header")
    if len(values) < 2:
        raise ConfigError(f"{path}: need at least two samples")
    t = np.asarray(times)
    dt = t[1] - t[0]
    steps = np.diff(t)
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-9, atol=0.0):
        raise ConfigError(f"{path}: time column is not a uniform grid")
    if not np.isclose(t[0], 0.5 * dt, rtol=1e-9):
        raise ConfigError(f"{path}: times must be interval midpoints")
    duration = dt * len(values)
    if spec is not None:
        if len(values) != spec.n_steps:
            raise DimensionMismatchError(
                f"{path}: pulse has {len(values)} samples, "
                f"config grid has {spec.n_steps} steps"
            )
        if not np.isclose(duration, spec.duration, rtol=1e-9):
            raise DimensionMismatchError(
                f"{path}: pulse spans duration {duration!r}, "
                f"config expects {spec.duration!r}"
            )
        duration = spec.duration
    return ControlField(values=np.asarray(values), node_index=node_index,
                        duration=duration)


def write_convergence_csv(records: Sequence[IterationRecord],
                          path: str | Path,
                          config_hash: str = "unknown") -> None:
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write("iteration,j_t_surrogate,j_t_exact,pulse_update_norm,"
                     "wall_time\n")
        for rec in records:
            exact = "" if rec.j_t_exact is None else fmt(rec.j_t_exact)
            handle.write(
                f"{rec.iteration},{fmt(rec.j_t_surrogate)},{exact},"
                f"{fmt(rec.pulse_update_norm)},{fmt(rec.wall_time)}\n"
            )


def write_dynamics_csv(record: DynamicsRecord, path: str | Path,
                       config_hash: str = "unknown") -> None:
    """One row per grid time: populations per node, vacuum, decay rate."""
    path = Path(path)
    n = record.n_nodes
    cols = ["t"]
    cols += [f"atom_pop_{i}" for i in range(1, n + 1)]
    cols += [f"cavity_pop_{i}" for i in range(1, n + 1)]
    cols += ["vacuum_pop", "collective_decay"]
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write(",".join(cols) + "\n")
        for j, t in enumerate(record.times):
            row = [fmt(t)]
            row += [fmt(record.atom_pop[j, i]) for i in range(n)]
            row += [fmt(record.cavity_pop[j, i]) for i in range(n)]
            row += [fmt(record.vacuum_pop[j]), fmt(record.collective[j])]
            handle.write(",".join(row) + "\n")


def write_jumps_csv(jumps_per_trajectory: Sequence[Sequence[Jump]],
                    path: str | Path,
                    config_hash: str = "unknown") -> None:
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write("trajectory,time,op_index\n")
        for k, jumps in enumerate(jumps_per_trajectory):
            for jump in jumps:
                handle.write(f"{k},{fmt(jump.time)},{jump.op_index}\n")


def write_states_csv(result: EnsembleResult, path: str | Path,
                     config_hash: str = "unknown") -> None:
    """Per-trajectory normalized amplitudes on the grid plus jump counts."""
    if result.states is None:
        raise ValueError("ensemble was not run with record='states'")
    path = Path(path)
    m, n_pts, dim = result.states.shape
    cols = ["trajectory", "t"]
    for i in range(dim):
        cols += [f"re_c{i}", f"im_c{i}"]
    cols.append("jumps_so_far")
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write(",".join(cols) + "\n")
        for k in range(m):
            jump_times = np.asarray([j.time for j in result.jumps[k]])
            for j in range(n_pts):
                t = result.times[j]
                row = [str(k), fmt(t)]
                for i in range(dim):
                    amp = result.states[k, j, i]
                    row += [fmt(amp.real), fmt(amp.imag)]
                row.append(str(int(np.sum(jump_times <= t))))
                handle.write(",".join(row) + "\n")


def write_noise_csv(rows: Iterable[tuple[str, int, int, int, float]],
                    path: str | Path,
                    config_hash: str = "unknown") -> None:
    """Rows: (variant, n_trajectories, seed, control_index, nu)."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write("variant,n_trajectories,seed,control,nu\n")
        for variant, m, seed, control, nu in rows:
            handle.write(f"{variant},{m},{seed},{control},{fmt(nu)}\n")


def write_noise_fit_csv(rows: Iterable[tuple[str, int, PowerLawFit]],
                        path: str | Path,
                        config_hash: str = "unknown") -> None:
    """Rows: (variant, control_index, power-law fit of mean nu vs M)."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# config: {config_hash}\n")
        handle.write("variant,control,exponent,prefactor,residual\n")
        for variant, control, fit in rows:
            handle.write(
                f"{variant},{control},{fmt(fit.exponent)},"
                f"{fmt(fit.prefactor)},{fmt(fit.residual)}\n"
            )
