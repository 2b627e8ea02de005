"""Run configuration: flat key=value files with dotted section names.

A config file looks like::

    # two-node preset
    network.n_nodes = 2
    network.delta = 100.0
    krotov.variant = density
    seed = 7

Unknown keys, malformed lines and type errors are reported with their
line number.  The resolved configuration (all defaults filled in) has a
canonical text form whose SHA-256 prefix stamps every output file.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .krotov import KrotovConfig
from .network import NetworkSpec

__all__ = [
    "RunConfig",
    "parse_config_text",
    "load_config",
    "resolve_config",
    "canonical_text",
    "config_hash",
    "save_config",
]

_REQUIRED = object()

# key -> (kind, default); kinds: int, float, bool, str, floats (comma list)
_SCHEMA: dict[str, tuple[str, object]] = {
    "network.n_nodes": ("int", _REQUIRED),
    "network.g": ("float", 1.0),
    "network.delta": ("float", _REQUIRED),
    "network.kappa": ("float", _REQUIRED),
    "network.duration": ("float", _REQUIRED),
    "network.n_steps": ("int", _REQUIRED),
    "guess.peak": ("float", None),          # None -> 2*delta*kappa/g
    "guess.shape": ("str", "blackman"),
    "krotov.variant": ("str", "density"),
    "krotov.lambda": ("floats", (100.0,)),
    "krotov.n_iterations": ("int", 1000),
    "krotov.n_trajectories": ("int", 1),
    "krotov.eval_exact_every": ("int", 10),
    "krotov.shape_flank_fraction": ("float", 0.1),
    "krotov.adapt_lambda": ("bool", True),
    "krotov.stop_below": ("float", 0.0),
    "propagation.density_method": ("str", "auto"),
    "propagation.rk4_substeps": ("int", 10),
    "seed": ("int", 0),
    "output_dir": ("str", "runs"),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved experiment description."""

    network: NetworkSpec
    krotov: KrotovConfig
    guess_peak: float
    guess_shape: str
    seed: int
    output_dir: str
    density_method: str
    rk4_substeps: int


def _convert(kind: str, raw: str, where: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "floats":
            return tuple(float(part) for part in raw.split(","))
        return raw
    except ValueError as err:
        raise ConfigError(f"{where}: {err}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Parse config text into a typed key -> value mapping.

    Raises :class:`ConfigError` naming the offending line for malformed
    lines, unknown keys and conversion failures.
    """
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {stripped!r}"
            )
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        kind, _ = _SCHEMA[key]
        values[key] = _convert(kind, raw, f"{source}:{lineno}")
    return values


def resolve_config(values: dict[str, object],
                   overrides: dict[str, object] | None = None) -> RunConfig:
    """Fill defaults, apply overrides and build the typed config.

    ``overrides`` maps schema keys to already-typed values (command-line
    flags); they win over the file.
    """
    merged: dict[str, object] = {}
    for key, (kind, default) in _SCHEMA.items():
        if overrides and key in overrides and overrides[key] is not None:
            merged[key] = overrides[key]
        elif key in values:
            merged[key] = values[key]
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        elif key == "output_dir":
            # MCOCT_OUTPUT_DIR replaces only the built-in default; a value
            # in the config file or an explicit flag still wins
            merged[key] = os.environ.get("MCOCT_OUTPUT_DIR", default)
        else:
            merged[key] = default
    try:
        net = NetworkSpec(
            n_nodes=merged["network.n_nodes"],
            delta=merged["network.delta"],
            kappa=merged["network.kappa"],
            duration=merged["network.duration"],
            n_steps=merged["network.n_steps"],
            g=merged["network.g"],
        )
    except ValueError as err:
        raise ConfigError(f"invalid network parameters: {err}") from None
    peak = merged["guess.peak"]
    if peak is None:
        peak = 2.0 * net.delta * net.kappa / net.g
    if merged["guess.shape"] not in ("blackman", "zero"):
        raise ConfigError(
            f"guess.shape must be 'blackman' or 'zero', got {merged['guess.shape']!r}"
        )
    lams = merged["krotov.lambda"]
    lam = lams[0] if len(lams) == 1 else tuple(lams)
    try:
        kro = KrotovConfig(
            variant=merged["krotov.variant"],
            n_iterations=merged["krotov.n_iterations"],
            lambda_weight=lam,
            n_trajectories=merged["krotov.n_trajectories"],
            base_seed=merged["seed"],
            eval_exact_every=merged["krotov.eval_exact_every"],
            shape_flank_fraction=merged["krotov.shape_flank_fraction"],
            adapt_lambda=merged["krotov.adapt_lambda"],
            stop_below=merged["krotov.stop_below"],
            density_method=merged["propagation.density_method"],
            rk4_substeps=merged["propagation.rk4_substeps"],
        )
    except ValueError as err:
        raise ConfigError(f"invalid krotov parameters: {err}") from None
    if kro.density_method not in ("auto", "expm", "rk4"):
        raise ConfigError(
            f"propagation.density_method must be auto|expm|rk4, "
            f"got {kro.density_method!r}"
        )
    if kro.rk4_substeps < 10:
        raise ConfigError("propagation.rk4_substeps must be >= 10")
    return RunConfig(
        network=net,
        krotov=kro,
        guess_peak=peak,
        guess_shape=merged["guess.shape"],
        seed=merged["seed"],
        output_dir=merged["output_dir"],
        density_method=kro.density_method,
        rk4_substeps=kro.rk4_substeps,
    )


def load_config(path: str | Path,
                overrides: dict[str, object] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return resolve_config(parse_config_text(text, source=str(path)), overrides)


def _format_value(kind: str, value) -> str:
    if kind == "float":
        return f"{float(value):.17g}"
    if kind == "floats":
        vals = value if isinstance(value, tuple) else (value,)
        return ",".join(f"{float(v):.17g}" for v in vals)
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


def canonical_text(config: RunConfig) -> str:
    """Serialize the resolved config in schema order (stable hashing)."""
    net, kro = config.network, config.krotov
    lam = kro.lambda_weight
    lam = lam if isinstance(lam, tuple) else (lam,)
    flat = {
        "network.n_nodes": net.n_nodes,
        "network.g": net.g,
        "network.delta": net.delta,
        "network.kappa": net.kappa,
        "network.duration": net.duration,
        "network.n_steps": net.n_steps,
        "guess.peak": config.guess_peak,
        "guess.shape": config.guess_shape,
        "krotov.variant": kro.variant,
        "krotov.lambda": lam,
        "krotov.n_iterations": kro.n_iterations,
        "krotov.n_trajectories": kro.n_trajectories,
        "krotov.eval_exact_every": kro.eval_exact_every,
        "krotov.shape_flank_fraction": kro.shape_flank_fraction,
        "krotov.adapt_lambda": kro.adapt_lambda,
        "krotov.stop_below": kro.stop_below,
        "propagation.density_method": config.density_method,
        "propagation.rk4_substeps": config.rk4_substeps,
        "seed": config.seed,
    }
    lines = ["# resolved configuration"]
    # output_dir is deliberately left out: where results land must not
    # change the run identity stamped into result headers
    for key, (kind, _) in _SCHEMA.items():
        if key == "output_dir":
            continue
        lines.append(f"{key} = {_format_value(kind, flat[key])}")
    return "\n".join(lines) + "\n"


def config_hash(config: RunConfig) -> str:
    """Short SHA-256 prefix identifying the resolved configuration."""
    return hashlib.sha256(canonical_text(config).encode()).hexdigest()[:12]


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(canonical_text(config))
