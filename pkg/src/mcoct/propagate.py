"""Propagation of pure-state trajectories and density matrices.

Pure states follow the Monte-Carlo wavefunction algorithm: propagate
under the non-hermitian effective Hamiltonian with piecewise-constant
controls, resolve the exact jump time inside a step by bisection on the
squared norm against a uniform threshold, apply the jump operator,
renormalize and redraw.  Grid snapshots are stored normalized; the
running sub-normalized state is carried internally.

Density matrices evolve under the Lindblad generator, either through
per-interval superoperator exponentials (exact duality between forward
and adjoint propagation, the default at small dimension) or classical
RK4 with fixed substeps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DimensionMismatchError, PropagationError
from .network import ControlField, NetworkSpec, build_collective_lindblad, \
    build_control_operators, build_drift_hamiltonian
from .states import DensityMatrix, Operator, StateVector

__all__ = [
    "RngStream",
    "trajectory_stream",
    "Jump",
    "Trajectory",
    "DensityHistory",
    "effective_hamiltonian",
    "step_propagate_pure",
    "mcwf_propagate",
    "backward_mcwf",
    "mcwf_ensemble",
    "density_propagate",
    "backward_density_propagate",
    "as_control_matrix",
]

BISECT_RTOL = 1e-10
BISECT_MAX_ITER = 200
NORM_GROWTH_TOL = 1e-12
TRACE_DRIFT_TOL = 1e-6

# phase tags entering the per-trajectory stream identity
PHASE_FORWARD = 0
PHASE_BACKWARD = 1
PHASE_UPDATE = 2


class RngStream:
    """Deterministic uniform stream backed by the Philox counter generator.

    The stream is fully determined by ``(seed, spawn_key)`` through
    ``numpy.random.SeedSequence``; numpy guarantees bit-stable output for
    a fixed bit generator across platforms and releases.
    """

    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def uniform(self) -> float:
        """Next uniform real in [0, 1)."""
        return float(self._gen.random())

    def __repr__(self):
        return f"RngStream(seed={self.seed}, spawn_key={self.spawn_key})"


def trajectory_stream(base_seed: int, iteration: int, trajectory: int,
                      phase: int) -> RngStream:
    """Stream for one trajectory of one propagation phase.

    Separate (iteration, trajectory, phase) tuples give statistically
    independent streams, so jumps differ between iterations and between
    forward and backward passes of the same iteration.
    """
    return RngStream(base_seed, spawn_key=(iteration, trajectory, phase))


class Jump(NamedTuple):
    time: float
    op_index: int


@dataclass(frozen=True)
class Trajectory:
    """One stochastic trajectory on the time grid.

    ``states[j]`` is the normalized snapshot at t_j; ``norm_sq[j]`` the
    squared norm of the carried sub-normalized state just before that
    renormalization (1 exactly at points coinciding with a jump or the
    start).  For backward propagations the snapshots are additionally
    scaled by the norm of the boundary co-state, and annihilated
    co-states appear as exact zeros.
    """

    times: np.ndarray
    states: np.ndarray
    norm_sq: np.ndarray
    jumps: tuple[Jump, ...]
    seed: tuple

    @property
    def n_steps(self) -> int:
        return self.times.shape[0] - 1

    def final_state(self) -> StateVector:
        return StateVector(self.states[-1])


@dataclass(frozen=True)
class DensityHistory:
    times: np.ndarray
    matrices: np.ndarray

    @property
    def final(self) -> DensityMatrix:
        return DensityMatrix(self.matrices[-1])


# --- assembled dense model --------------------------------------------

class DenseModel:
    """Dense operator bundle for one network spec.

    Carries the drift Hamiltonian, control derivatives mu_i, the
    collective Lindblad operator and derived combinations, all as plain
    complex arrays sized for O(d^3) work per interval.
    """

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.dim = spec.dim
        self.h_drift = build_drift_hamiltonian(spec).to_dense()
        self.mus = tuple(m.to_dense() for m in build_control_operators(spec))
        self.lindblad = build_collective_lindblad(spec).to_dense()
        self.ldag_l = self.lindblad.conj().T @ self.lindblad
        # anti-hermitian decay part of the effective Hamiltonian
        self.h_eff_drift = self.h_drift - 0.5j * self.ldag_l
        self.jump_ops_forward = (self.lindblad,)
        self.jump_ops_backward = (self.lindblad.conj().T,)
        # norm-decay contributions L_l^dag L_l weight the jump choice in
        # both directions (the adjoint generator decays at the same rate)
        self.weight_ops = (self.ldag_l,)

    def h_eff(self, omegas: np.ndarray) -> np.ndarray:
        h = self.h_eff_drift.copy()
        for omega, mu in zip(omegas, self.mus):
            h += omega * mu
        return h

    def hamiltonian(self, omegas: np.ndarray) -> np.ndarray:
        h = self.h_drift.copy()
        for omega, mu in zip(omegas, self.mus):
            h += omega * mu
        return h


_MODEL_CACHE: dict[NetworkSpec, DenseModel] = {}


def dense_model(spec: NetworkSpec) -> DenseModel:
    model = _MODEL_CACHE.get(spec)
    if model is None:
        model = _MODEL_CACHE.setdefault(spec, DenseModel(spec))
    return model


def effective_hamiltonian(h: Operator, lindblads: Sequence[Operator]) -> Operator:
    """Non-hermitian H_eff = H - (i/2) sum_l L_l^dag L_l."""
    m = h.matrix.astype(np.complex128)
    for lop in lindblads:
        if lop.dim != h.dim:
            raise DimensionMismatchError("lindblad dimension differs from H")
        m = m - 0.5j * (lop.matrix.conj().T @ lop.matrix)
    return Operator(m, hermitian=False)


def step_propagate_pure(psi: StateVector, h_eff: Operator, dt: float) -> StateVector:
    """Propagate |psi> by exp(-i H_eff dt) (dense scaling-and-squaring)."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if h_eff.dim != psi.dim:
        raise DimensionMismatchError("H_eff dimension differs from state")
    u = sla.expm(-1j * dt * h_eff.to_dense())
    return StateVector(u @ psi.amplitudes)


def as_control_matrix(controls: Sequence[ControlField], spec: NetworkSpec) -> np.ndarray:
    """Stack controls into an (n_steps, n_nodes) array, node order 1..N.

    Rejects duplicate or missing nodes and any grid mismatch against the
    spec, reporting expected vs actual grid parameters.
    """
    by_node = {}
    for c in controls:
        if c.node_index in by_node:
            raise DimensionMismatchError(f"duplicate control for node {c.node_index}")
        by_node[c.node_index] = c
    expected = set(range(1, spec.n_nodes + 1))
    if set(by_node) != expected:
        raise DimensionMismatchError(
            f"controls cover nodes {sorted(by_node)}, expected {sorted(expected)}"
        )
    out = np.empty((spec.n_steps, spec.n_nodes), dtype=np.float64)
    for i in range(1, spec.n_nodes + 1):
        c = by_node[i]
        if c.n_steps != spec.n_steps or not np.isclose(
                c.duration, spec.duration, rtol=1e-12, atol=0.0):
            raise DimensionMismatchError(
                "control grid mismatch: expected "
                f"(n_steps={spec.n_steps}, T={spec.duration!r}), got "
                f"(n_steps={c.n_steps}, T={c.duration!r}) for node {i}"
            )
        out[:, i - 1] = c.values
    return out


# --- interval propagator with jump resolution -------------------------

class _IntervalProp:
    """Step matrices for one piecewise-constant interval.

    ``full(dt)`` and ``substep(tau)`` return exp(-i H_eff tau) for the
    forward direction or its adjoint exp(+i H_eff^dag tau) for the
    backward direction, so the propagated norm is non-increasing either
    way.
    """

    def __init__(self, h_eff: np.ndarray, backward: bool):
        self._gen = (1j * h_eff.conj().T) if backward else (-1j * h_eff)
        self._cache: dict[float, np.ndarray] = {}

    def substep(self, tau: float) -> np.ndarray:
        u = self._cache.get(tau)
        if u is None:
            u = sla.expm(self._gen * tau)
            self._cache[tau] = u
        return u


def _norm_sq(vec: np.ndarray) -> float:
    return float(np.real(np.vdot(vec, vec)))


def _bisect_jump_time(prop: _IntervalProp, psi: np.ndarray, span: float,
                      threshold: float) -> tuple[float, np.ndarray]:
    """Locate tau in (0, span] where ||U(tau) psi||^2 crosses threshold.

    The squared norm is non-increasing in tau, so plain bisection on the
    bracket converges; we stop at relative tolerance 1e-10 on the
    squared norm (or a width floor guarding against a flat plateau at
    machine precision).
    """
    lo, hi = 0.0, span
    tau = span
    state = prop.substep(span) @ psi
    width_floor = span * 1e-15
    for _ in range(BISECT_MAX_ITER):
        if abs(_norm_sq(state) - threshold) <= BISECT_RTOL * max(threshold, 1e-300):
            return tau, state
        if hi - lo <= width_floor:
            return tau, state
        mid = 0.5 * (lo + hi)
        cand = prop.substep(mid) @ psi
        if _norm_sq(cand) > threshold:
            lo = mid
        else:
            hi, tau, state = mid, mid, cand
    raise PropagationError(
        f"jump-time bisection failed to converge within {BISECT_MAX_ITER} "
        f"iterations (threshold {threshold:.3e})"
    )


class EnsembleStepper:
    """Interval-synchronous propagation of M trajectories.

    All trajectories share the per-interval step matrix; jump handling
    is per column.  ``direction='backward'`` propagates co-states under
    the adjoint effective Hamiltonian with daggered jump operators; a
    jump that maps a co-state to zero annihilates it (the column becomes
    exactly zero for the remaining grid points).
    """

    def __init__(self, model: DenseModel, psi0: np.ndarray,
                 rngs: Sequence[RngStream], direction: str = "forward"):
        if direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {direction!r}")
        self.model = model
        self.backward = direction == "backward"
        psi0 = np.array(psi0, dtype=np.complex128)
        if psi0.ndim == 1:
            psi0 = psi0[:, None]
        if psi0.shape[0] != model.dim:
            raise DimensionMismatchError("state dimension differs from model")
        self.psi = psi0
        self.m = psi0.shape[1]
        if len(rngs) != self.m:
            raise ValueError("need one rng stream per trajectory")
        self.rngs = list(rngs)
        self.jump_ops = model.jump_ops_backward if self.backward \
            else model.jump_ops_forward
        self.weight_ops = model.weight_ops
        self.jumps: list[list[Jump]] = [[] for _ in range(self.m)]
        self.alive = np.ones(self.m, dtype=bool)
        self.thresholds = np.empty(self.m)
        for k in range(self.m):
            ns = _norm_sq(self.psi[:, k])
            if ns <= 0.0:
                # zero boundary co-state: nothing to propagate
                self.alive[k] = False
                self.thresholds[k] = -1.0
            else:
                self.psi[:, k] /= np.sqrt(ns)
                self.thresholds[k] = self.rngs[k].uniform()

    def normalized(self) -> np.ndarray:
        """Column-normalized snapshot (annihilated columns stay zero)."""
        out = self.psi.copy()
        norms = np.sqrt(np.real(np.einsum("ik,ik->k", out.conj(), out)))
        live = norms > 0.0
        out[:, live] /= norms[live]
        return out

    def norm_sq_columns(self) -> np.ndarray:
        return np.real(np.einsum("ik,ik->k", self.psi.conj(), self.psi))

    def step(self, interval_index: int, omegas: np.ndarray,
             u: np.ndarray | None = None) -> np.ndarray:
        """Advance every trajectory across one grid interval.

        Parameters
        ----------
        interval_index : int
            1-based interval number j (spanning [t_{j-1}, t_j]); used
            only for jump-time bookkeeping.
        omegas : ndarray
            Control amplitudes on this interval, one per node.
        u : ndarray, optional
            Precomputed step matrix for this interval and direction;
            recomputed when omitted.

        Returns the step matrix actually used (for caller-side caching).
        """
        dt = self.model.spec.dt
        h_eff = None
        if u is None:
            h_eff = self.model.h_eff(omegas)
            gen = (1j * h_eff.conj().T) if self.backward else (-1j * h_eff)
            u = sla.expm(gen * dt)
        prev_ns = self.norm_sq_columns()
        trial = u @ self.psi
        ns = np.real(np.einsum("ik,ik->k", trial.conj(), trial))
        grow = self.alive & (ns > prev_ns * (1.0 + NORM_GROWTH_TOL))
        if np.any(grow):
            raise PropagationError(
                f"norm grew across interval {interval_index} for trajectories "
                f"{np.nonzero(grow)[0].tolist()}"
            )
        crossed = self.alive & (ns <= self.thresholds)
        if np.any(crossed):
            if h_eff is None:
                h_eff = self.model.h_eff(omegas)
            prop = _IntervalProp(h_eff, self.backward)
            for k in np.nonzero(crossed)[0]:
                trial[:, k] = self._resolve_jumps(prop, k, interval_index, dt)
        self.psi = trial
        return u

    def _resolve_jumps(self, prop: _IntervalProp, k: int,
                       interval_index: int, dt: float) -> np.ndarray:
        """Re-run interval j for trajectory k, bisecting each jump."""
        spec = self.model.spec
        # grid times of the interval endpoints in propagation order
        if self.backward:
            t_from = interval_index * spec.dt
        else:
            t_from = (interval_index - 1) * spec.dt
        psi = self.psi[:, k].copy()
        rng = self.rngs[k]
        offset = 0.0
        while True:
            remaining = dt - offset
            trial = prop.substep(remaining) @ psi
            if _norm_sq(trial) > self.thresholds[k]:
                return trial
            tau, at_jump = _bisect_jump_time(prop, psi, remaining,
                                             self.thresholds[k])
            offset += tau
            t_jump = (t_from - offset) if self.backward else (t_from + offset)
            op_index = self._choose_operator(at_jump, rng)
            self.jumps[k].append(Jump(t_jump, op_index))
            jumped = self.jump_ops[op_index] @ at_jump
            ns = _norm_sq(jumped)
            if ns <= 0.0:
                if self.backward:
                    # adjoint jump maps the co-state out of its sector:
                    # the co-state is annihilated and stays zero
                    self.alive[k] = False
                    self.thresholds[k] = -1.0
                    return np.zeros_like(psi)
                raise PropagationError(
                    f"jump operator {op_index} annihilated trajectory {k} "
                    f"at t={t_jump:.6f}"
                )
            psi = jumped / np.sqrt(ns)
            self.thresholds[k] = rng.uniform()
            if offset >= dt:
                return psi

    def _choose_operator(self, psi: np.ndarray, rng: RngStream) -> int:
        weights = np.array([
            max(float(np.real(np.vdot(psi, w @ psi))), 0.0)
            for w in self.weight_ops
        ])
        total = weights.sum()
        u = rng.uniform()
        if total <= 0.0:
            # degenerate corner: no operator has weight; fall back to uniform
            return int(u * len(weights))
        return int(np.searchsorted(np.cumsum(weights) / total, u, side="right"))


# --- public trajectory propagation ------------------------------------

def _controls_or_matrix(controls, spec) -> np.ndarray:
    if isinstance(controls, np.ndarray):
        if controls.shape != (spec.n_steps, spec.n_nodes):
            raise DimensionMismatchError(
                f"control matrix shape {controls.shape}, expected "
                f"({spec.n_steps}, {spec.n_nodes})"
            )
        return controls
    return as_control_matrix(controls, spec)


def mcwf_propagate(psi0: StateVector, controls, spec: NetworkSpec,
                   rng: RngStream) -> Trajectory:
    """Run one Monte-Carlo wavefunction trajectory over the full grid.

    Identical inputs and stream produce bit-identical output.  The
    returned snapshots are normalized; jump times are resolved inside
    their interval by bisection on the squared norm.
    """
    omegas = _controls_or_matrix(controls, spec)
    model = dense_model(spec)
    if psi0.dim != model.dim:
        raise DimensionMismatchError("initial state dimension differs from model")
    stepper = EnsembleStepper(model, psi0.amplitudes, [rng])
    n = spec.n_steps
    states = np.empty((n + 1, model.dim), dtype=np.complex128)
    norm_sq = np.empty(n + 1)
    states[0] = stepper.normalized()[:, 0]
    norm_sq[0] = stepper.norm_sq_columns()[0]
    for j in range(1, n + 1):
        stepper.step(j, omegas[j - 1])
        states[j] = stepper.normalized()[:, 0]
        norm_sq[j] = stepper.norm_sq_columns()[0]
    return Trajectory(
        times=spec.t_grid,
        states=states,
        norm_sq=norm_sq,
        jumps=tuple(stepper.jumps[0]),
        seed=(rng.seed, rng.spawn_key),
    )


def backward_mcwf(chi_T: StateVector, controls, spec: NetworkSpec,
                  rng: RngStream) -> Trajectory:
    """Propagate a co-state from T to 0 with the adjoint jump process.

    Between jumps the co-state follows exp(+i H_eff^dag tau) (its norm
    decays at rate <L^dag L>); thresholds and bisection mirror the
    forward algorithm with daggered jump operators.  Snapshots are
    normalized and rescaled by the boundary norm, making the recorded
    history an unbiased stand-in for the adjoint-propagated co-state.
    A zero boundary state returns an identically zero history.
    """
    omegas = _controls_or_matrix(controls, spec)
    model = dense_model(spec)
    if chi_T.dim != model.dim:
        raise DimensionMismatchError("co-state dimension differs from model")
    scale = np.sqrt(chi_T.norm_sq)
    n = spec.n_steps
    states = np.zeros((n + 1, model.dim), dtype=np.complex128)
    norm_sq = np.zeros(n + 1)
    if scale == 0.0:
        return Trajectory(spec.t_grid, states, norm_sq, (), (rng.seed, rng.spawn_key))
    stepper = EnsembleStepper(model, chi_T.amplitudes, [rng], direction="backward")
    states[n] = scale * stepper.normalized()[:, 0]
    norm_sq[n] = stepper.norm_sq_columns()[0]
    for j in range(n, 0, -1):
        stepper.step(j, omegas[j - 1])
        states[j - 1] = scale * stepper.normalized()[:, 0]
        norm_sq[j - 1] = stepper.norm_sq_columns()[0]
    return Trajectory(
        times=spec.t_grid,
        states=states,
        norm_sq=norm_sq,
        jumps=tuple(stepper.jumps[0]),
        seed=(rng.seed, rng.spawn_key),
    )


@dataclass
class EnsembleResult:
    """Outcome of a vectorized multi-trajectory run."""

    times: np.ndarray
    finals: np.ndarray                    # (m, d) normalized final states
    jumps: tuple[tuple[Jump, ...], ...]   # per trajectory
    states: np.ndarray | None = None      # (m, n_t+1, d) when recorded
    average: np.ndarray | None = None     # (n_t+1, d, d) when recorded

    @property
    def n_jumps(self) -> np.ndarray:
        return np.array([len(j) for j in self.jumps])


def mcwf_ensemble(psi0: StateVector, controls, spec: NetworkSpec,
                  rngs: Sequence[RngStream], record: str = "finals",
                  step_matrices: Sequence[np.ndarray] | None = None) -> EnsembleResult:
    """Propagate M trajectories under shared controls.

    ``record`` selects what is kept: ``"finals"`` (always available),
    ``"states"`` for full normalized histories, or ``"average"`` for the
    running mean projector (1/M) sum_k |psi_k><psi_k| on the grid, the
    trajectory estimate of the density matrix.
    """
    if record not in ("finals", "states", "average"):
        raise ValueError(f"unknown record mode {record!r}")
    omegas = _controls_or_matrix(controls, spec)
    model = dense_model(spec)
    m = len(rngs)
    psi0_mat = np.repeat(psi0.amplitudes[:, None], m, axis=1)
    stepper = EnsembleStepper(model, psi0_mat, rngs)
    n = spec.n_steps
    states = average = None
    if record == "states":
        states = np.empty((m, n + 1, model.dim), dtype=np.complex128)
        states[:, 0, :] = stepper.normalized().T
    elif record == "average":
        average = np.empty((n + 1, model.dim, model.dim), dtype=np.complex128)
        snap = stepper.normalized()
        average[0] = (snap @ snap.conj().T) / m
    for j in range(1, n + 1):
        u = step_matrices[j - 1] if step_matrices is not None else None
        stepper.step(j, omegas[j - 1], u=u)
        if record == "states":
            states[:, j, :] = stepper.normalized().T
        elif record == "average":
            snap = stepper.normalized()
            average[j] = (snap @ snap.conj().T) / m
    return EnsembleResult(
        times=spec.t_grid,
        finals=stepper.normalized().T.copy(),
        jumps=tuple(tuple(j) for j in stepper.jumps),
        states=states,
        average=average,
    )


# --- density propagation ----------------------------------------------

def _superop_pieces(model: DenseModel):
    """Liouvillian as an affine function of the controls (row-major vec).

    vec(A X B) = (A kron B^T) vec(X) for row-major flattening, giving
    Lambda = -i (H kron I - I kron H^T) + (L kron conj(L))
             - 1/2 (L^dag L kron I + I kron (L^dag L)^T).
    """
    d = model.dim
    eye = np.eye(d)
    lop = model.lindblad
    ldl = model.ldag_l

    def commutator_piece(h):
        return -1j * (np.kron(h, eye) - np.kron(eye, h.T))

    drift = commutator_piece(model.h_drift)
    drift += np.kron(lop, lop.conj())
    drift -= 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))
    controls = tuple(commutator_piece(mu) for mu in model.mus)
    return drift, controls


_SUPEROP_CACHE: dict[NetworkSpec, tuple] = {}


def superop_pieces(spec: NetworkSpec):
    pieces = _SUPEROP_CACHE.get(spec)
    if pieces is None:
        pieces = _SUPEROP_CACHE.setdefault(spec, _superop_pieces(dense_model(spec)))
    return pieces


def interval_superop(spec: NetworkSpec, omegas: np.ndarray) -> np.ndarray:
    """exp(dt * Lambda(omegas)) for one interval, acting on vec(rho)."""
    drift, controls = superop_pieces(spec)
    lam = drift.copy()
    for omega, piece in zip(omegas, controls):
        lam += omega * piece
    return sla.expm(spec.dt * lam)


def _lindblad_rhs(model: DenseModel, h: np.ndarray, rho: np.ndarray) -> np.ndarray:
    lop, ldl = model.lindblad, model.ldag_l
    out = -1j * (h @ rho - rho @ h)
    out += lop @ rho @ lop.conj().T
    out -= 0.5 * (ldl @ rho + rho @ ldl)
    return out


def _adjoint_rhs(model: DenseModel, h: np.ndarray, p: np.ndarray) -> np.ndarray:
    # generator of d P/ds with s = T - t; identity is a fixed point
    lop, ldl = model.lindblad, model.ldag_l
    out = 1j * (h @ p - p @ h)
    out += lop.conj().T @ p @ lop
    out -= 0.5 * (ldl @ p + p @ ldl)
    return out


def _rk4_interval(model, h, rho, dt, substeps, rhs):
    sub = dt / substeps
    for _ in range(substeps):
        k1 = rhs(model, h, rho)
        k2 = rhs(model, h, rho + 0.5 * sub * k1)
        k3 = rhs(model, h, rho + 0.5 * sub * k2)
        k4 = rhs(model, h, rho + sub * k3)
        rho = rho + (sub / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return rho

# superoperator exponentials stay affordable up to this many matrix entries
_SUPEROP_DIM_LIMIT = 1024


def resolve_density_method(method: str, dim: int) -> str:
    """Pick the concrete density integrator for ``method='auto'``."""
    if method == "auto":
        return "expm" if dim * dim <= _SUPEROP_DIM_LIMIT else "rk4"
    if method not in ("expm", "rk4"):
        raise ValueError(f"unknown density method {method!r}")
    return method


def density_propagate(rho0: DensityMatrix, controls, spec: NetworkSpec,
                      method: str = "auto", substeps: int = 10) -> DensityHistory:
    """Propagate a density matrix across the full grid.

    ``method='expm'`` exponentiates the per-interval Liouvillian (exact
    for piecewise-constant controls); ``method='rk4'`` integrates with
    fixed substeps (at least 10 per interval).  Trace drift beyond 1e-6
    raises :class:`PropagationError`.
    """
    omegas = _controls_or_matrix(controls, spec)
    model = dense_model(spec)
    if rho0.dim != model.dim:
        raise DimensionMismatchError("density dimension differs from model")
    method = resolve_density_method(method, model.dim)
    if method == "rk4" and substeps < 10:
        raise ValueError("rk4 density propagation requires >= 10 substeps")
    n, d = spec.n_steps, model.dim
    out = np.empty((n + 1, d, d), dtype=np.complex128)
    out[0] = rho0.matrix
    trace0 = float(np.real(np.trace(rho0.matrix)))
    rho = rho0.matrix.copy()
    for j in range(1, n + 1):
        if method == "expm":
            e = interval_superop(spec, omegas[j - 1])
            rho = (e @ rho.reshape(-1)).reshape(d, d)
        else:
            h = model.hamiltonian(omegas[j - 1])
            rho = _rk4_interval(model, h, rho, spec.dt, substeps, _lindblad_rhs)
        rho = 0.5 * (rho + rho.conj().T)
        out[j] = rho
    drift = abs(float(np.real(np.trace(rho))) - trace0)
    if drift > TRACE_DRIFT_TOL:
        raise PropagationError(f"density trace drifted by {drift:.3e}")
    return DensityHistory(spec.t_grid, out)


def backward_density_propagate(p_T: DensityMatrix, controls, spec: NetworkSpec,
                               method: str = "auto", substeps: int = 10,
                               step_superops: Sequence[np.ndarray] | None = None
                               ) -> DensityHistory:
    """Propagate a co-state matrix from T to 0 under the adjoint generator.

    dP/dt = -( i[H, P] + L^dag P L - 1/2 {L^dag L, P} ); the identity is
    a fixed point, and <<P(t)|rho(t)>> is conserved when rho runs
    forward under the same controls.  With ``step_superops`` (forward
    interval exponentials), the adjoint is applied exactly as the
    conjugate transpose.
    """
    omegas = _controls_or_matrix(controls, spec)
    model = dense_model(spec)
    if p_T.dim != model.dim:
        raise DimensionMismatchError("co-state dimension differs from model")
    method = resolve_density_method(method, model.dim)
    if method == "rk4" and substeps < 10:
        raise ValueError("rk4 density propagation requires >= 10 substeps")
    n, d = spec.n_steps, model.dim
    out = np.empty((n + 1, d, d), dtype=np.complex128)
    out[n] = p_T.matrix
    p = p_T.matrix.copy()
    for j in range(n, 0, -1):
        if method == "expm":
            if step_superops is not None:
                e = step_superops[j - 1]
            else:
                e = interval_superop(spec, omegas[j - 1])
            p = (e.conj().T @ p.reshape(-1)).reshape(d, d)
        else:
            h = model.hamiltonian(omegas[j - 1])
            p = _rk4_interval(model, h, p, spec.dt, substeps, _adjoint_rhs)
        p = 0.5 * (p + p.conj().T)
        out[j - 1] = p
    return DensityHistory(spec.t_grid, out)
