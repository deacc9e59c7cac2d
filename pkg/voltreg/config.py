"""Solver configuration: defaults, presets, YAML overrides."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

from .errors import ConfigError, ParseError
from .utils import load_yaml

logger = logging.getLogger(__name__)

MODES = ("linear", "feedback")

########################################
# CONFIGURATION
########################################

CONFIG_DEFAULTS = [
    # Each setting is a pair: (setting_name, default_value).
    # Setting names are prefixed with 'VOLTREG_'; YAML files and CLI flags use
    # the lower-case name without the prefix.
    # Primal stepsize. Contraction is guaranteed below 2M/L^2, which
    # estimate_constants reports.
    ("VOLTREG_EPS", 5e-2),
    # The dual stepsize is EPS * EPS_DUAL_MULT. Keep it at 1 when checking
    # the contraction condition.
    ("VOLTREG_EPS_DUAL_MULT", 1.0),
    # Dual regularization; the voltage bounds are met up to about ETA * mu.
    ("VOLTREG_ETA", 1e-3),
    # Voltage magnitude bounds in p.u., squared before use.
    ("VOLTREG_VMIN", 0.95),
    ("VOLTREG_VMAX", 1.05),
    ("VOLTREG_MAX_ITERS", 20000),
    # Stop when |P0(t+1) - P0(t)| < SIGMA and the step inf-norm < SIGMA_Z.
    ("VOLTREG_SIGMA", 1e-6),
    ("VOLTREG_SIGMA_Z", 1e-8),
    # "linear" refreshes v and P0 from the linear model, "feedback" from the
    # nonlinear sweep.
    ("VOLTREG_MODE", "linear"),
    # A step norm above this (or non-finite) ends the run as diverged.
    ("VOLTREG_DIVERGENCE_LIMIT", 1e8),
    # Estimate M and L before solving and warn when eps >= 2M/L^2.
    ("VOLTREG_CHECK_STEPSIZE", True),
    ("VOLTREG_SWEEP_TOL", 1e-10),
    ("VOLTREG_SWEEP_MAX_ITERS", 100),
    # Seeds random initializations and synthetic feeders.
    ("VOLTREG_SEED", 0),
]

PRESETS = {
    # Primal 3.5e-4 with a dual stepsize ten times larger.
    "small-step": {"eps": 3.5e-4, "eps_dual_mult": 10.0},
}


def default_settings() -> dict:
    """Return the defaults keyed by their short lower-case names."""
    return {name[len("VOLTREG_") :].lower(): value for name, value in CONFIG_DEFAULTS}


@dataclass(frozen=True)
class SolverConfig:
    """Validated, immutable solver settings."""

    eps: float = 5e-2
    eps_dual_mult: float = 1.0
    eta: float = 1e-3
    vmin: float = 0.95
    vmax: float = 1.05
    max_iters: int = 20000
    sigma: float = 1e-6
    sigma_z: float = 1e-8
    mode: str = "linear"
    divergence_limit: float = 1e8
    check_stepsize: bool = True
    sweep_tol: float = 1e-10
    sweep_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        for name in ("eps", "eps_dual_mult", "eta", "sigma", "sigma_z", "sweep_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 < self.vmin < self.vmax:
            raise ConfigError(
                f"voltage bounds must satisfy 0 < vmin < vmax, got {self.vmin}, {self.vmax}"
            )
        if self.max_iters < 1 or self.sweep_max_iters < 1:
            raise ConfigError("iteration limits must be at least 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def eps_dual(self) -> float:
        return self.eps * self.eps_dual_mult

    @property
    def v_lower(self) -> float:
        return self.vmin**2

    @property
    def v_upper(self) -> float:
        return self.vmax**2

    @property
    def feedback(self) -> bool:
        return self.mode == "feedback"

    def replace(self, **changes) -> SolverConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name, value, default):
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def load_config(path=None, overrides=None, preset=None) -> SolverConfig:
    """
    Build a SolverConfig from defaults, a preset, a YAML file and overrides.

    Later layers win. Overrides whose value is None are ignored, so unset CLI
    flags leave the lower layers alone.
    """
    defaults = default_settings()
    settings = dict(defaults)
    layers = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        layers.append(PRESETS[preset])
    if path is not None:
        try:
            data = load_yaml(path)
        except OSError as e:
            raise ParseError(f"Cannot read config file {path}: {e}") from e
        except Exception as e:  # ruamel raises a family of parser errors
            raise ParseError(f"Malformed config file {path}: {e}") from e
        if not isinstance(data, dict):
            raise ParseError(f"Config file {path} must hold a mapping")
        layers.append(data)
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})

    for layer in layers:
        for key, value in layer.items():
            key = str(key).replace("-", "_").lower()
            if key not in defaults:
                raise ConfigError(f"Unknown setting {key!r}")
            try:
                settings[key] = _coerce(key, value, defaults[key])
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Bad value for {key}: {value!r}") from e

    logger.debug(f"Resolved solver settings: {settings}")
    return SolverConfig(**settings)
