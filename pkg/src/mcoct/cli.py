"""Command-line interface.

Subcommands:

* ``simulate``   propagate a pulse set (density matrix or trajectories)
* ``optimize``   run Krotov iterations and write pulses + convergence
* ``noise-scan`` sweep trajectory counts and seeds, measure pulse noise
* ``validate``   run built-in self-checks against known closed forms

``--config`` accepts a file path or the name of a bundled preset
(``two-node``, ``twenty-node``).  Outputs land in
``<output-dir>/<command>-<confighash>/`` and every file carries the
resolved-config hash in its header.
"""
from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, config as configmod, fileio, krotov, network, propagate
from .errors import ConfigError, DimensionMismatchError, OptimizationAborted
from .states import DensityMatrix, StateVector

__all__ = ["main", "build_parser"]

def _preset_dir():
    return resources.files("mcoct") / "presets"


def _available_presets() -> list[str]:
    names = []
    for entry in _preset_dir().iterdir():
        if entry.name.endswith(".cfg"):
            names.append(entry.name[:-4])
    return sorted(names)


def _read_config_source(name: str) -> tuple[str, str]:
    """Return (text, label) for a path or bundled preset name."""
    path = Path(name)
    if path.is_file():
        return path.read_text(), str(path)
    for candidate in (name, name + ".cfg"):
        entry = _preset_dir() / candidate
        if entry.is_file():
            return entry.read_text(), f"preset:{candidate}"
    raise ConfigError(
        f"config {name!r} is neither a file nor a bundled preset "
        f"(available presets: {', '.join(_available_presets())})"
    )


def _parse_float_list(raw: str, flag: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated numbers, got {raw!r}")


def _parse_int_list(raw: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {raw!r}")


def _overrides_from_args(args) -> dict[str, object]:
    over: dict[str, object] = {}
    if getattr(args, "variant", None):
        over["krotov.variant"] = args.variant
    if getattr(args, "n_traj", None) is not None:
        over["krotov.n_trajectories"] = args.n_traj
    if getattr(args, "iterations", None) is not None:
        over["krotov.n_iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "lambda_weight", None):
        over["krotov.lambda"] = _parse_float_list(args.lambda_weight, "--lambda")
    if getattr(args, "output_dir", None):
        over["output_dir"] = args.output_dir
    return over


def _load_run_config(args) -> configmod.RunConfig:
    text, label = _read_config_source(args.config)
    values = configmod.parse_config_text(text, source=label)
    return configmod.resolve_config(values, _overrides_from_args(args))


def _make_outdir(cfg: configmod.RunConfig, command: str) -> tuple[Path, str]:
    chash = configmod.config_hash(cfg)
    out = Path(cfg.output_dir) / f"{command}-{chash}"
    out.mkdir(parents=True, exist_ok=True)
    configmod.save_config(cfg, out / "config.cfg")
    return out, chash


def _guess_controls(cfg: configmod.RunConfig):
    spec = cfg.network
    if cfg.guess_shape == "zero":
        return tuple(
            network.ControlField(np.zeros(spec.n_steps), node, spec.duration)
            for node in range(1, spec.n_nodes + 1)
        )
    return tuple(
        network.blackman_guess(spec, cfg.guess_peak, node)
        for node in range(1, spec.n_nodes + 1)
    )


def _load_pulses(paths, spec):
    pulses = [fileio.load_pulse(p, spec) for p in paths]
    return tuple(sorted(pulses, key=lambda c: c.node_index))


def _progress(stream, every: int):
    def callback(rec):
        if rec.iteration % every == 0 or rec.j_t_exact is not None:
            exact = "" if rec.j_t_exact is None else f" exact={rec.j_t_exact:.6e}"
            print(
                f"  iter {rec.iteration}: j_t={rec.j_t_surrogate:.6e}{exact}",
                file=stream,
            )
    return callback


# --- simulate ----------------------------------------------------------

def _cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    spec = cfg.network
    if args.pulse:
        controls = _load_pulses(args.pulse, spec)
    else:
        controls = _guess_controls(cfg)
    out, chash = _make_outdir(cfg, "simulate")
    for pulse in controls:
        fileio.save_pulse(pulse, out / f"pulse_node{pulse.node_index}.csv", chash)
    if args.method == "density":
        rho0 = DensityMatrix.from_state(network.initial_state(spec))
        history = propagate.density_propagate(
            rho0, controls, spec,
            method=cfg.density_method, substeps=cfg.rk4_substeps,
        )
        record = analysis.dynamics_record(history, spec)
        fileio.write_dynamics_csv(record, out / "dynamics.csv", chash)
    else:
        m = args.n_traj or cfg.krotov.n_trajectories
        rngs = [
            propagate.trajectory_stream(cfg.seed, 0, k, propagate.PHASE_FORWARD)
            for k in range(m)
        ]
        mode = "states" if args.write_states else "average"
        result = propagate.mcwf_ensemble(
            network.initial_state(spec), controls, spec, rngs, record=mode)
        if args.write_states:
            fileio.write_states_csv(result, out / "states.csv", chash)
            avg = np.einsum("kti,ktj->tij", result.states,
                            result.states.conj()) / m
        else:
            avg = result.average
        history = propagate.DensityHistory(result.times, avg)
        record = analysis.dynamics_record(history, spec)
        fileio.write_dynamics_csv(record, out / "dynamics.csv", chash)
        fileio.write_jumps_csv(result.jumps, out / "jumps.csv", chash)
        print(f"trajectories: {m}, total jumps: {int(result.n_jumps.sum())}",
              file=sys.stderr)
    tgt = network.target_state(spec)
    final_fid = abs(np.vdot(tgt.amplitudes,
                            history.matrices[-1] @ tgt.amplitudes))
    print(f"final target overlap: {final_fid:.6f}", file=sys.stderr)
    print(out)
    return 0


# --- optimize ----------------------------------------------------------

def _cmd_optimize(args) -> int:
    cfg = _load_run_config(args)
    spec = cfg.network
    guess = _guess_controls(cfg)
    out, chash = _make_outdir(cfg, "optimize")
    for pulse in guess:
        fileio.save_pulse(pulse, out / f"guess_node{pulse.node_index}.csv", chash)
    callback = _progress(sys.stderr, max(1, cfg.krotov.eval_exact_every)) \
        if args.verbose else None
    try:
        result = krotov.optimize(cfg.krotov, guess, spec, callback=callback)
    except OptimizationAborted as err:
        print(f"optimization aborted: {err}", file=sys.stderr)
        fileio.write_convergence_csv(err.records, out / "convergence.csv", chash)
        for pulse in err.controls:
            fileio.save_pulse(
                pulse, out / f"pulse_node{pulse.node_index}.csv", chash)
        return 1
    for pulse in result.controls:
        fileio.save_pulse(pulse, out / f"pulse_node{pulse.node_index}.csv", chash)
    fileio.write_convergence_csv(result.records, out / "convergence.csv", chash)
    if args.write_dynamics:
        rho0 = DensityMatrix.from_state(network.initial_state(spec))
        history = propagate.density_propagate(
            rho0, result.controls, spec,
            method=cfg.density_method, substeps=cfg.rk4_substeps,
        )
        fileio.write_dynamics_csv(
            analysis.dynamics_record(history, spec),
            out / "dynamics.csv", chash)
    err_final = result.final_error
    if err_final is not None:
        print(f"final error: {err_final:.6e} "
              f"after {len(result.records)} iterations", file=sys.stderr)
    print(out)
    return 0


# --- noise scan --------------------------------------------------------

def _scan_job(payload):
    cfg, variant, m, seed, n_iter = payload
    spec = cfg.network
    kro = replace(
        cfg.krotov,
        variant=variant,
        n_trajectories=m,
        base_seed=seed,
        n_iterations=n_iter,
        adapt_lambda=False,
        eval_exact_every=max(n_iter, 1),
    )
    guess = _guess_controls(cfg)
    result = krotov.optimize(kro, guess, spec)
    report = analysis.noise_measure(result.controls)
    return variant, m, seed, report.nu


def _cmd_noise_scan(args) -> int:
    cfg = _load_run_config(args)
    variants = tuple(args.variants.split(","))
    for v in variants:
        if v not in ("independent", "cross"):
            raise ConfigError(
                f"--variants entries must be independent|cross, got {v!r}")
    m_list = _parse_int_list(args.m_list, "--m-list")
    if len(m_list) < 3:
        raise ConfigError("--m-list needs at least three trajectory counts "
                          "for a meaningful power-law fit")
    seeds = _parse_int_list(args.seeds, "--seeds")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    n_iter = cfg.krotov.n_iterations
    out, chash = _make_outdir(cfg, "noise-scan")
    jobs = []
    for variant in variants:
        for m in m_list:
            if variant == "cross" and m < 2:
                print(f"skipping cross variant at M={m} (needs M >= 2)",
                      file=sys.stderr)
                continue
            for seed in seeds:
                jobs.append((cfg, variant, m, seed, n_iter))
    results = {}
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for variant, m, seed, nus in pool.map(_scan_job, jobs):
                results[(variant, m, seed)] = nus
    else:
        for job in jobs:
            variant, m, seed, nus = _scan_job(job)
            results[(variant, m, seed)] = nus
            print(f"  {variant} M={m} seed={seed}: "
                  + ", ".join(f"{nu:.4e}" for nu in nus), file=sys.stderr)
    rows = []
    for variant in variants:
        for m in m_list:
            for seed in seeds:
                key = (variant, m, seed)
                if key not in results:
                    continue
                for i, nu in enumerate(results[key]):
                    rows.append((variant, m, seed, i + 1, nu))
    fileio.write_noise_csv(rows, out / "noise.csv", chash)
    fits = []
    for variant in variants:
        for control in range(1, cfg.network.n_nodes + 1):
            ms, means = [], []
            for m in m_list:
                vals = [results[(variant, m, s)][control - 1]
                        for s in seeds if (variant, m, s) in results]
                if vals:
                    ms.append(m)
                    means.append(float(np.mean(vals)))
            if len(ms) >= 2 and all(v > 0 for v in means):
                fits.append((variant, control,
                             analysis.fit_power_law(ms, means)))
    fileio.write_noise_fit_csv(fits, out / "noise_fit.csv", chash)
    for variant, control, fit in fits:
        print(f"{variant} control {control}: nu ~ M^{fit.exponent:+.3f}",
              file=sys.stderr)
    print(out)
    return 0


# --- validate ----------------------------------------------------------

def _check_pulse_roundtrip(tmp: Path) -> str:
    rng = np.random.default_rng(12345)
    spec = network.NetworkSpec(2, 100.0, 1.0, 5.0, 64)
    pulse = network.ControlField(rng.normal(size=64) * 1e3, 1, spec.duration)
    path = tmp / "roundtrip.csv"
    fileio.save_pulse(pulse, path, "selfcheck")
    back = fileio.load_pulse(path, spec)
    diff = float(np.max(np.abs(back.values - pulse.values)))
    if diff != 0.0 or back.node_index != 1:
        raise AssertionError(f"pulse round-trip differs by {diff}")
    return "pulse file round-trips float64 exactly"

def _check_config_roundtrip(tmp: Path) -> str:
    text, label = _read_config_source("two-node")
    cfg = configmod.resolve_config(configmod.parse_config_text(text, label))
    again = configmod.resolve_config(
        configmod.parse_config_text(configmod.canonical_text(cfg), "canon"))
    if configmod.config_hash(cfg) != configmod.config_hash(again):
        raise AssertionError("canonical config text does not round-trip")
    return "resolved config round-trips through its canonical text"

def _check_smoothing_weights(tmp: Path) -> str:
    expected = np.array([-3.0, 12.0, 17.0, 12.0, -3.0]) / 35.0
    impulse = np.zeros(11)
    impulse[5] = 1.0
    pulse = network.ControlField(impulse, 1, 1.0)
    smooth = analysis.savgol_smooth(pulse, window=5, order=3)
    got = smooth.values[3:8]
    if np.max(np.abs(got - expected[::-1])) > 1e-12:
        raise AssertionError(f"interior weights {got} != {expected}")
    return "quintic-window cubic smoother reproduces (-3,12,17,12,-3)/35"

def _check_cavity_decay(tmp: Path) -> str:
    spec = network.NetworkSpec(1, 100.0, 1.0, 2.0, 200)
    basis = network.Basis(1)
    amps = np.zeros(spec.dim, dtype=np.complex128)
    amps[basis.cavity(1)] = 1.0
    rho0 = DensityMatrix.from_state(StateVector(amps))
    zeros = [network.ControlField(np.zeros(spec.n_steps), 1, spec.duration)]
    hist = propagate.density_propagate(rho0, zeros, spec, method="expm")
    pop = np.real(hist.matrices[:, basis.cavity(1), basis.cavity(1)])
    law = np.exp(-2.0 * spec.kappa * hist.times)
    rel = float(np.max(np.abs(pop - law) / law))
    if rel > 1e-6:
        raise AssertionError(f"cavity decay deviates from exp(-2 kappa t): {rel:.2e}")
    return "empty-cavity population follows exp(-2 kappa t) to 1e-6"

def _check_dark_state(tmp: Path) -> str:
    spec = network.NetworkSpec(2, 100.0, 1.0, 1.0, 100)
    tgt = network.target_state(spec)
    rho0 = DensityMatrix.from_state(tgt)
    zeros = [network.ControlField(np.zeros(spec.n_steps), n, spec.duration)
             for n in (1, 2)]
    hist = propagate.density_propagate(rho0, zeros, spec, method="expm")
    dev = float(np.max(np.abs(hist.matrices[-1] - hist.matrices[0])))
    if dev > 1e-12:
        raise AssertionError(f"dark state moved by {dev:.2e}")
    return "shared atomic state is stationary with controls off"

def _check_duality(tmp: Path) -> str:
    rng = np.random.default_rng(7)
    spec = network.NetworkSpec(2, 100.0, 1.0, 1.0, 50)
    u = rng.normal(size=(spec.n_steps, 2)) * 300.0
    controls = [network.ControlField(u[:, 0], 1, spec.duration),
                network.ControlField(u[:, 1], 2, spec.duration)]
    a = rng.normal(size=(spec.dim, spec.dim)) \
        + 1j * rng.normal(size=(spec.dim, spec.dim))
    rho = DensityMatrix(a @ a.conj().T / np.trace(a @ a.conj().T).real)
    b = rng.normal(size=(spec.dim, spec.dim)) \
        + 1j * rng.normal(size=(spec.dim, spec.dim))
    pmat = DensityMatrix(0.5 * (b + b.conj().T))
    fwd = propagate.density_propagate(rho, controls, spec, method="expm")
    bwd = propagate.backward_density_propagate(pmat, controls, spec,
                                               method="expm")
    overlaps = np.einsum("tij,tij->t", bwd.matrices.conj(), fwd.matrices)
    spread = float(np.max(np.abs(overlaps - overlaps[0])))
    if spread > 1e-8:
        raise AssertionError(f"duality pairing drifts by {spread:.2e}")
    return "forward/adjoint pairing <<P(t)|rho(t)>> is conserved"

def _check_cross_trace(tmp: Path) -> str:
    rng = np.random.default_rng(99)
    spec = network.NetworkSpec(2, 100.0, 1.0, 1.0, 10)
    mu = network.build_control_operators(spec)[0]
    m = 7
    xis = [StateVector(rng.normal(size=spec.dim)
                               + 1j * rng.normal(size=spec.dim))
           for _ in range(m)]
    psis = [StateVector(rng.normal(size=spec.dim)
                                + 1j * rng.normal(size=spec.dim))
            for _ in range(m)]
    fast = krotov.update_increment_cross(xis, psis, mu, 1.0, 1.0)
    mud = mu.to_dense()
    slow = 0.0
    for k in range(m):
        for n in range(m):
            slow += np.imag(
                np.vdot(xis[k].amplitudes, mud @ psis[n].amplitudes)
                * np.vdot(psis[n].amplitudes, xis[k].amplitudes))
    slow /= m * m
    if abs(fast - slow) > 1e-12:
        raise AssertionError(f"trace form differs from double sum: "
                             f"{abs(fast - slow):.2e}")
    return "cross-ensemble trace form matches the explicit double sum"

def _check_trajectory_determinism(tmp: Path) -> str:
    spec = network.NetworkSpec(1, 100.0, 1.0, 3.0, 150)
    basis = network.Basis(1)
    amps = np.zeros(spec.dim, dtype=np.complex128)
    amps[basis.cavity(1)] = 1.0
    psi0 = StateVector(amps)
    zeros = [network.ControlField(np.zeros(spec.n_steps), 1, spec.duration)]
    runs = []
    for _ in range(2):
        rng = propagate.trajectory_stream(42, 3, 5, propagate.PHASE_FORWARD)
        runs.append(propagate.mcwf_propagate(psi0, zeros, spec, rng))
    if not np.array_equal(runs[0].states, runs[1].states) \
            or runs[0].jumps != runs[1].jumps:
        raise AssertionError("same stream gave different trajectories")
    if len(runs[0].jumps) == 0:
        raise AssertionError("expected at least one jump over 3 lifetimes")
    return "trajectories are bit-identical for identical streams"


_CHECKS = [
    ("pulse-roundtrip", _check_pulse_roundtrip),
    ("config-roundtrip", _check_config_roundtrip),
    ("smoothing-weights", _check_smoothing_weights),
    ("cavity-decay", _check_cavity_decay),
    ("dark-state", _check_dark_state),
    ("duality", _check_duality),
    ("cross-trace", _check_cross_trace),
    ("determinism", _check_trajectory_determinism),
]


def _cmd_validate(args) -> int:
    import tempfile

    failures = 0
    with tempfile.TemporaryDirectory() as tmpdir:
        tmp = Path(tmpdir)
        for name, check in _CHECKS:
            try:
                detail = check(tmp)
            except Exception as err:  # noqa: BLE001 - report and continue
                failures += 1
                print(f"validate: {name}: FAIL ({err})")
            else:
                print(f"validate: {name}: PASS ({detail})")
    if failures:
        print(f"{failures} of {len(_CHECKS)} checks failed")
        return 1
    print(f"all {len(_CHECKS)} checks passed")
    return 0


# --- parser ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcoct",
        description="Trajectory-based optimal control for cascaded "
                    "cavity networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True,
                       help="config file path or bundled preset name")
        p.add_argument("--seed", type=int, default=None,
                       help="override the base RNG seed")
        p.add_argument("--output-dir", default=None,
                       help="override the output directory")
        p.add_argument("-v", "--verbose", action="store_true")

    p_sim = sub.add_parser("simulate", help="propagate pulses and record "
                                            "populations")
    add_common(p_sim)
    p_sim.add_argument("--method", choices=("density", "mcwf"),
                       default="density")
    p_sim.add_argument("--pulse", action="append", default=None,
                       metavar="FILE",
                       help="pulse file (repeat per node); default is the "
                            "configured guess")
    p_sim.add_argument("--n-traj", type=int, default=None,
                       help="trajectory count for --method mcwf")
    p_sim.add_argument("--write-states", action="store_true",
                       help="also write per-trajectory amplitudes")
    p_sim.set_defaults(func=_cmd_simulate)

    p_opt = sub.add_parser("optimize", help="run Krotov iterations")
    add_common(p_opt)
    p_opt.add_argument("--variant",
                       choices=("density", "independent", "cross"),
                       default=None)
    p_opt.add_argument("--n-traj", type=int, default=None)
    p_opt.add_argument("--iterations", type=int, default=None)
    p_opt.add_argument("--lambda", dest="lambda_weight", default=None,
                       help="step penalty (scalar or comma list per node)")
    p_opt.add_argument("--write-dynamics", action="store_true",
                       help="also propagate the optimized pulses and write "
                            "dynamics.csv")
    p_opt.set_defaults(func=_cmd_optimize)

    p_scan = sub.add_parser("noise-scan",
                            help="sweep trajectory counts and seeds, "
                                 "measure pulse noise")
    add_common(p_scan)
    p_scan.add_argument("--variants", default="independent,cross",
                        help="comma list of trajectory variants to scan")
    p_scan.add_argument("--m-list", default="1,2,4,8,16,32",
                        help="comma list of trajectory counts")
    p_scan.add_argument("--seeds", default="0,1,2,3,4",
                        help="comma list of base seeds")
    p_scan.add_argument("--iterations", type=int, default=None)
    p_scan.add_argument("--lambda", dest="lambda_weight", default=None)
    p_scan.add_argument("--workers", type=int, default=1,
                        help="process pool size for scan jobs")
    p_scan.set_defaults(func=_cmd_noise_scan)

    p_val = sub.add_parser("validate", help="run built-in self-checks")
    p_val.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionMismatchError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
