"""Monte-Carlo trajectory optimal control for cascaded cavity networks."""

from .analysis import (
    DynamicsRecord, NoiseReport, PowerLawFit, dynamics_record, fit_power_law,
    noise_measure, savgol_smooth,
)
from .config import (
    RunConfig, canonical_text, config_hash, load_config, parse_config_text,
    resolve_config, save_config,
)
from .errors import (
    ConfigError, DimensionMismatchError, OptimizationAborted,
    PropagationError, ZeroNormError,
)
from .fileio import (
    load_pulse, save_pulse, write_convergence_csv, write_dynamics_csv,
    write_jumps_csv, write_noise_csv, write_noise_fit_csv, write_states_csv,
)
from .krotov import (
    IterationRecord, KrotovConfig, OptimizeResult, functional_density,
    functional_trajectories, krotov_iterate, optimize, update_increment_cross,
    update_increment_traj,
)
from .network import (
    Basis, ControlField, NetworkSpec, ShapeFunction, blackman_guess,
    blackman_window, build_basis, build_collective_lindblad,
    build_control_operators, build_drift_hamiltonian, build_hamiltonian,
    flanked_shape, initial_state, target_state,
)
from .propagate import (
    DensityHistory, Jump, RngStream, Trajectory, backward_density_propagate,
    backward_mcwf, density_propagate, effective_hamiltonian, mcwf_ensemble,
    mcwf_propagate, step_propagate_pure, trajectory_stream,
)
from .states import (
    DensityMatrix, Operator, StateVector, expectation, hs_overlap, normalize,
)

__version__ = "0.1.0"
