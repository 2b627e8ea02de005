"""Cascaded cavity-chain model in the single-excitation subspace.

Each node holds a driven three-level atom coupled to a cavity mode; the
cavities decay into a shared unidirectional channel.  After adiabatic
elimination of the excited atomic level, the dynamics on the single
photon/spin excitation sector is spanned by

    |vac>, |atom_1>, |cav_1>, ..., |atom_N>, |cav_N>

(dimension 2N + 1), with one control amplitude Omega_i(t) per node and a
single collective decay operator sqrt(2 kappa) sum_i a_i.  Units are
dimensionless: g = hbar = 1, energies in g, times in 1/g.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError
from .states import Operator, StateVector

__all__ = [
    "NetworkSpec",
    "Basis",
    "ControlField",
    "ShapeFunction",
    "build_basis",
    "build_drift_hamiltonian",
    "build_control_operators",
    "build_hamiltonian",
    "build_collective_lindblad",
    "initial_state",
    "target_state",
    "blackman_window",
    "blackman_guess",
    "flanked_shape",
]


@dataclass(frozen=True)
class NetworkSpec:
    """Static parameters of the cavity chain and its time grid.

    Parameters
    ----------
    n_nodes : int
        Number of nodes N >= 1.
    delta : float
        Atomic detuning (in g); the drive enters as Omega*g/(2*delta).
    kappa : float
        Cavity line width into the cascade channel (in g).
    duration : float
        Control horizon T.
    n_steps : int
        Number of piecewise-constant control intervals n_t.
    g : float
        Atom-cavity coupling; 1 in the dimensionless convention.
    """

    n_nodes: int
    delta: float
    kappa: float
    duration: float
    n_steps: int
    g: float = 1.0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.delta <= 0 or self.g <= 0:
            raise ValueError("delta and g must be positive")
        if self.kappa < 0:
            # kappa = 0 is the dissipation-free limit, useful for checks
            raise ValueError("kappa must be non-negative")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")

    @property
    def dim(self) -> int:
        return 2 * self.n_nodes + 1

    @property
    def dt(self) -> float:
        return self.duration / self.n_steps

    @property
    def t_grid(self) -> np.ndarray:
        """Grid points t_j = j*T/n_t, j = 0..n_t."""
        return np.linspace(0.0, self.duration, self.n_steps + 1)

    @property
    def t_midpoints(self) -> np.ndarray:
        """Interval midpoints where piecewise-constant pulses are sampled."""
        return (np.arange(self.n_steps) + 0.5) * self.dt


@dataclass(frozen=True)
class Basis:
    """Index map for the single-excitation basis of a chain."""

    n_nodes: int

    @property
    def dim(self) -> int:
        return 2 * self.n_nodes + 1

    @property
    def vacuum(self) -> int:
        return 0

    def atom(self, i: int) -> int:
        """Basis index of |atom_i> (node labels are 1-based)."""
        self._check_node(i)
        return 2 * i - 1

    def cavity(self, i: int) -> int:
        """Basis index of |cav_i>."""
        self._check_node(i)
        return 2 * i

    @property
    def labels(self) -> tuple[str, ...]:
        out = ["vac"]
        for i in range(1, self.n_nodes + 1):
            out += [f"atom{i}", f"cav{i}"]
        return tuple(out)

    def _check_node(self, i: int):
        if not 1 <= i <= self.n_nodes:
            raise IndexError(f"node index {i} outside 1..{self.n_nodes}")


def build_basis(spec: NetworkSpec) -> Basis:
    return Basis(spec.n_nodes)


@dataclass(frozen=True)
class ControlField:
    """Piecewise-constant control amplitude of one node.

    ``values[j]`` is the amplitude on the interval [t_j, t_{j+1}); the
    field is conventionally sampled at interval midpoints.
    """

    values: np.ndarray
    node_index: int
    duration: float

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise ValueError("control values must be a 1-d array, length >= 2")
        if not np.all(np.isfinite(arr)):
            raise ValueError("control values must be finite")
        if self.node_index < 1:
            raise ValueError("node_index is 1-based")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def dt(self) -> float:
        return self.duration / self.n_steps

    @property
    def t_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.duration, self.n_steps + 1)

    @property
    def t_midpoints(self) -> np.ndarray:
        return (np.arange(self.n_steps) + 0.5) * self.dt

    def with_values(self, values) -> "ControlField":
        return ControlField(values, self.node_index, self.duration)


@dataclass(frozen=True)
class ShapeFunction:
    """Update-shape samples S(t_j) on the full time grid (n_t + 1 points).

    S gates the Krotov update: intervals whose grid sample is zero keep
    the guess value exactly.  Constraints: 0 <= S <= 1 and S = 0 at both
    ends of the horizon.
    """

    values: np.ndarray
    duration: float

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 3:
            raise ValueError("shape values must be a 1-d array on the grid")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise ValueError("shape values must lie in [0, 1]")
        if arr[0] != 0.0 or arr[-1] != 0.0:
            raise ValueError("shape must vanish at t=0 and t=T")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1


# --- operators ---------------------------------------------------------

def build_drift_hamiltonian(spec: NetworkSpec) -> Operator:
    """Control-independent part of the chain Hamiltonian.

    The on-site terms cancel exactly on the single-excitation sector, so
    the drift reduces to the cascade-mediated cavity-cavity coupling
    <cav_i|H|cav_j> = i*kappa for i < j (and the conjugate below the
    diagonal).
    """
    b = Basis(spec.n_nodes)
    d = b.dim
    h = sp.lil_matrix((d, d), dtype=np.complex128)
    for i in range(1, spec.n_nodes + 1):
        for j in range(i + 1, spec.n_nodes + 1):
            h[b.cavity(i), b.cavity(j)] = 1j * spec.kappa
            h[b.cavity(j), b.cavity(i)] = -1j * spec.kappa
    return Operator(h.tocsr(), hermitian=True)


def build_control_operators(spec: NetworkSpec) -> tuple[Operator, ...]:
    """Derivative operators mu_i = dH/dOmega_i, one per node.

    mu_i couples |atom_i> and |cav_i> with matrix element
    <atom_i|mu_i|cav_i> = -i*g/(2*delta).
    """
    b = Basis(spec.n_nodes)
    d = b.dim
    coeff = -1j * spec.g / (2.0 * spec.delta)
    out = []
    for i in range(1, spec.n_nodes + 1):
        m = sp.lil_matrix((d, d), dtype=np.complex128)
        m[b.atom(i), b.cavity(i)] = coeff
        m[b.cavity(i), b.atom(i)] = -coeff
        out.append(Operator(m.tocsr(), hermitian=True))
    return tuple(out)


def build_hamiltonian(spec: NetworkSpec, omegas) -> Operator:
    """Chain Hamiltonian at fixed control amplitudes.

    Parameters
    ----------
    omegas : sequence of float
        One drive amplitude per node.
    """
    omegas = np.asarray(omegas, dtype=np.float64)
    if omegas.shape != (spec.n_nodes,):
        raise DimensionMismatchError(
            f"expected {spec.n_nodes} amplitudes, got shape {omegas.shape}"
        )
    h = build_drift_hamiltonian(spec).matrix.astype(np.complex128)
    for omega, mu in zip(omegas, build_control_operators(spec)):
        h = h + omega * mu.matrix
    return Operator(h.tocsr(), hermitian=True)


def build_collective_lindblad(spec: NetworkSpec) -> Operator:
    """Collective decay operator L = sqrt(2 kappa) sum_i a_i.

    On the single-excitation basis L maps every |cav_i> to |vac> with
    amplitude sqrt(2 kappa); L^dagger L is rank one with eigenvalue
    2 kappa N on the symmetric cavity mode.
    """
    b = Basis(spec.n_nodes)
    d = b.dim
    amp = np.sqrt(2.0 * spec.kappa)
    m = sp.lil_matrix((d, d), dtype=np.complex128)
    for i in range(1, spec.n_nodes + 1):
        m[b.vacuum, b.cavity(i)] = amp
    return Operator(m.tocsr(), hermitian=False)


def initial_state(spec: NetworkSpec) -> StateVector:
    """Excitation parked on the first atom, |e g ... g>, cavities empty."""
    b = Basis(spec.n_nodes)
    amp = np.zeros(b.dim, dtype=np.complex128)
    amp[b.atom(1)] = 1.0
    return StateVector(amp)


def target_state(spec: NetworkSpec) -> StateVector:
    """Symmetric shared excitation (1/sqrt(N)) sum_i |atom_i>.

    This is the dark state of the collective decay restricted to the
    atomic sites; for N = 2 it is the Bell-like state
    (|eg> + |ge>)/sqrt(2).
    """
    b = Basis(spec.n_nodes)
    amp = np.zeros(b.dim, dtype=np.complex128)
    for i in range(1, spec.n_nodes + 1):
        amp[b.atom(i)] = 1.0 / np.sqrt(spec.n_nodes)
    return StateVector(amp)


# --- guess pulse and update shape --------------------------------------

def blackman_window(t, duration: float, peak: float):
    """Blackman window peak*[0.42 - 0.5 cos(2 pi t/T) + 0.08 cos(4 pi t/T)].

    Vanishes at t = 0 and t = T, reaches ``peak`` at t = T/2.
    """
    t = np.asarray(t, dtype=np.float64)
    x = 2.0 * np.pi * t / duration
    return peak * (0.42 - 0.5 * np.cos(x) + 0.08 * np.cos(2.0 * x))


def blackman_guess(spec: NetworkSpec, peak: float, node_index: int) -> ControlField:
    """Blackman-window guess pulse sampled at interval midpoints.

    The default peak 2*delta*kappa/g makes the effective drive
    Omega*g/(2*delta) reach kappa at mid-horizon.
    """
    vals = blackman_window(spec.t_midpoints, spec.duration, peak)
    return ControlField(vals, node_index, spec.duration)


def default_guess_peak(spec: NetworkSpec) -> float:
    return 2.0 * spec.delta * spec.kappa / spec.g


def flanked_shape(spec: NetworkSpec, flank_fraction: float = 0.1) -> ShapeFunction:
    """Unit plateau with raised-cosine flanks of width flank_fraction*T.

    S(0) = S(T) = 0; S = 1 on the interior plateau; halfway up each
    flank S = 1/2.
    """
    if not 0.0 < flank_fraction <= 0.5:
        raise ValueError("flank_fraction must lie in (0, 0.5]")
    t = spec.t_grid
    flank = flank_fraction * spec.duration
    s = np.ones_like(t)
    rising = t < flank
    s[rising] = 0.5 * (1.0 - np.cos(np.pi * t[rising] / flank))
    falling = t > spec.duration - flank
    s[falling] = 0.5 * (1.0 - np.cos(np.pi * (spec.duration - t[falling]) / flank))
    # guard rounding so the endpoint invariant holds exactly
    s[0] = 0.0
    s[-1] = 0.0
    return ShapeFunction(s, spec.duration)
