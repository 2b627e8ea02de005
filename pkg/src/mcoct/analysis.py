"""Pulse-noise quantification and dynamics bookkeeping.

The optimized pulses of the trajectory variants ride on a smooth
backbone plus jump-induced noise; the noise measure integrates the
absolute deviation from a Savitzky-Golay smoothed reference, and its
scaling with the trajectory count M is summarized by a log-log
power-law fit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.signal

from .network import Basis, ControlField, NetworkSpec
from .propagate import DensityHistory, Trajectory, dense_model

__all__ = [
    "savgol_smooth",
    "noise_measure",
    "NoiseReport",
    "fit_power_law",
    "PowerLawFit",
    "DynamicsRecord",
    "dynamics_record",
]


def savgol_smooth(pulse: ControlField, window: int = 5, order: int = 3
                  ) -> ControlField:
    """Savitzky-Golay smoothing of a pulse (linear in the input).

    Each sample is replaced by the value of the least-squares polynomial
    of degree ``order`` fitted over the centered ``window``; near the
    edges the polynomial of the terminal window is evaluated at the
    boundary offsets instead of mirroring.  The default 5-point cubic
    has interior convolution weights (-3, 12, 17, 12, -3)/35.
    """
    if window % 2 != 1 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    if order >= window:
        raise ValueError("polynomial order must be smaller than the window")
    if pulse.n_steps < window:
        raise ValueError(
            f"pulse has {pulse.n_steps} samples, needs at least {window}"
        )
    smoothed = scipy.signal.savgol_filter(
        pulse.values, window_length=window, polyorder=order, mode="interp"
    )
    return pulse.with_values(smoothed)


@dataclass(frozen=True)
class NoiseReport:
    """Noise measures nu_i, one per control, with the filter settings."""

    nu: tuple[float, ...]
    window: int
    order: int


def noise_measure(pulses, window: int = 5, order: int = 3) -> NoiseReport:
    """Integrated absolute deviation from the smoothed pulse.

    nu_i = sum_j |Omega_i(t_j) - Omega_i^smooth(t_j)| * dt  (left
    Riemann sum over the control grid).  Accepts a single pulse or a
    sequence; order of the report follows the input order.
    """
    if isinstance(pulses, ControlField):
        pulses = (pulses,)
    nus = []
    for pulse in pulses:
        smooth = savgol_smooth(pulse, window, order)
        dev = np.abs(pulse.values - smooth.values)
        nus.append(float(np.sum(dev) * pulse.dt))
    return NoiseReport(nu=tuple(nus), window=window, order=order)


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    prefactor: float
    residual: float


def fit_power_law(x, y) -> PowerLawFit:
    """Least-squares line through (log x, log y): y ~ prefactor * x^exponent.

    ``residual`` is the L2 norm of the log-space fit residuals.  All
    inputs must be positive.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("need two same-length 1-d arrays with >= 2 points")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit requires positive data")
    lx, ly = np.log(x), np.log(y)
    coeffs, res, *_ = np.polyfit(lx, ly, 1, full=True)
    residual = float(np.sqrt(res[0])) if res.size else 0.0
    return PowerLawFit(
        exponent=float(coeffs[0]),
        prefactor=float(np.exp(coeffs[1])),
        residual=residual,
    )


@dataclass(frozen=True)
class DynamicsRecord:
    """Per-node populations and collective decay along the grid.

    ``atom_pop[j, i]`` and ``cavity_pop[j, i]`` are <Pi_e^(i)> and
    <a_i^dag a_i> at t_j for node i+1; ``collective`` is <L^dag L>;
    ``vacuum_pop`` completes the populations to the trace.
    """

    times: np.ndarray
    atom_pop: np.ndarray
    cavity_pop: np.ndarray
    collective: np.ndarray
    vacuum_pop: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.atom_pop.shape[1]


def dynamics_record(history, spec: NetworkSpec) -> DynamicsRecord:
    """Expectation-value series for a density history or a trajectory.

    Trajectory snapshots are normalized, so populations always sum to
    one at every grid point (matching the density-matrix trace).
    """
    basis = Basis(spec.n_nodes)
    model = dense_model(spec)
    if isinstance(history, DensityHistory):
        diag = np.real(np.einsum("tii->ti", history.matrices))
        ldl = model.ldag_l
        collective = np.real(np.einsum(
            "tij,ji->t", history.matrices, ldl
        ))
        times = history.times
    elif isinstance(history, Trajectory):
        amps = history.states
        diag = np.abs(amps) ** 2
        collective = np.real(np.einsum(
            "ti,ij,tj->t", amps.conj(), model.ldag_l, amps
        ))
        times = history.times
    else:
        raise TypeError(
            f"expected DensityHistory or Trajectory, got {type(history).__name__}"
        )
    atom_idx = [basis.atom(i) for i in range(1, spec.n_nodes + 1)]
    cav_idx = [basis.cavity(i) for i in range(1, spec.n_nodes + 1)]
    return DynamicsRecord(
        times=times,
        atom_pop=diag[:, atom_idx],
        cavity_pop=diag[:, cav_idx],
        collective=collective,
        vacuum_pop=diag[:, basis.vacuum],
    )
