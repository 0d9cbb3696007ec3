"""
Configuration management for dipwell.
Loads run configurations from TOML files, merges them over the defaults and
builds the typed parameter objects used by the solvers.
"""
import copy
import os
import tomllib

from core import POLARIZATION_OPTIONS, PhysicalParams, TrapParams
from errors import ConfigError
from grid import INIT_KINDS, GridSpec
from variational import INITIAL_SHAPES, VariationalSettings

# App info
APP_NAME = "dipwell"
VERSION = "0.3.0"

# Default settings
DEFAULTS = {
    "physical": {
        "na": 0.0,  # scaled scattering length N a / l
        "nadd": 0.0,  # scaled dipole length N a_dd / l, >= 0
        "polarization": "z",  # z: side by side (repulsive), x: head to tail (attractive)
    },
    "trap": {
        "v0": 80.0,  # well depth
        "wx": 0.5,
        "wy": 4.0,
        "wz": 0.5,
        "centers": [-1.0, 0.0, 1.0],  # well positions along x
    },
    "grid": {
        "nx": 128,
        "ny": 96,
        "nz": 64,
        "lx": 4.0,  # half-extents of the box
        "ly": 6.0,
        "lz": 3.0,
        "dt": 1.0e-3,
        "dipolar_cutoff": 0.0,  # truncation radius of the dipolar kernel, 0 = untruncated
        "threads": 1,  # FFT workers and sweep processes
    },
    "variational": {
        "dd_rtol": 1e-9,
        "stationary_rtol": 1e-12,
        "ode_rtol": 1e-9,
        "ode_atol": 1e-11,
        "pinv_floor": 1e-10,
        "fd_step": 1e-6,  # Newton and continuation Jacobians
        "jacobian_step": 1e-4,  # stability Jacobian
        "eps_stab": 1e-5,
        "pairing_tol": 1e-6,
        "newton_tol": 1e-9,
        "newton_max_iter": 30,
    },
    "run": {
        "engine": "grid",  # grid or variational
        "init": "three_gaussian",  # grid start: single_gaussian, three_gaussian, from_file
        "shape": "symmetric",  # variational start: symmetric, center, split, broken
        "tol": 1e-9,  # ITE relative energy slope
        "max_steps": 200000,
        "check_every": 10,
        "plateau_window": 2000,
        "stop_on_plateau": False,
        "t_end": 100.0,
        "sample_every": 0.1,
        "warm_start": True,
        "na_min": -0.3,
        "na_max": 0.8,
        "na_step": 0.01,
        "nadd_min": 0.0,
        "nadd_max": 0.7,
        "nadd_step": 0.02,
        "na_start": -0.03,  # ramp
        "na_end": -0.05,
        "t_ramp": 200.0,
        "ds": 0.02,  # continuation
        "ds_max": 0.05,
        "max_points": 400,
        "out": "out",
    },
}

ENGINE_OPTIONS = ["grid", "variational"]
INIT_OPTIONS = [k for k in INIT_KINDS if k != "from_variational"]
SHAPE_OPTIONS = list(INITIAL_SHAPES)

CONFIG_ENV_VAR = "DIPWELL_CONFIG"


def get_config_path():
    """Config file named by DIPWELL_CONFIG, or None."""
    return os.environ.get(CONFIG_ENV_VAR) or None


def merge_config(saved: dict) -> dict:
    """
    Merge a parsed document over the defaults.

    Raises:
        ConfigError: unknown section or key, naming it
    """
    config = copy.deepcopy(DEFAULTS)
    for section, values in saved.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]", key=section)
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table", key=section)
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}", key=f"{section}.{key}")
            config[section][key] = value
    return config


def load_config(path=None) -> dict:
    """Load a TOML run configuration, return validated defaults if no path is given."""
    path = path or get_config_path()
    if path is None:
        return validate_config(copy.deepcopy(DEFAULTS))
    try:
        with open(path, "rb") as f:
            saved = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return validate_config(merge_config(saved))


def apply_overrides(config: dict, overrides: dict) -> dict:
    """Apply dotted-key overrides ("physical.na": 0.5); None values are skipped."""
    config = copy.deepcopy(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {dotted}", key=dotted)
        config[section][key] = value
    return validate_config(config)


def _check_type(config: dict, section: str, key: str):
    default = DEFAULTS[section][key]
    value = config[section][key]
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            config[section][key] = float(value)
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{section}.{key} has the wrong type: {value!r}", key=f"{section}.{key}")


def validate_config(config: dict) -> dict:
    """Type-check every key and build the typed objects once to surface range errors."""
    for section, values in DEFAULTS.items():
        for key in values:
            _check_type(config, section, key)
    run = config["run"]
    if run["engine"] not in ENGINE_OPTIONS:
        raise ConfigError(f"run.engine must be one of {ENGINE_OPTIONS}", key="run.engine")
    if run["init"] not in INIT_OPTIONS:
        raise ConfigError(f"run.init must be one of {INIT_OPTIONS}", key="run.init")
    if run["shape"] not in SHAPE_OPTIONS:
        raise ConfigError(f"run.shape must be one of {SHAPE_OPTIONS}", key="run.shape")
    if config["physical"]["polarization"] not in POLARIZATION_OPTIONS:
        raise ConfigError(f"physical.polarization must be one of {POLARIZATION_OPTIONS}",
                          key="physical.polarization")
    if config["grid"]["threads"] < 1:
        raise ConfigError("grid.threads must be >= 1", key="grid.threads")
    for builder, section in ((to_physical_params, "physical"), (to_grid_spec, "grid"),
                             (to_variational_settings, "variational")):
        try:
            builder(config)
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"[{section}] {e}", key=section) from e
    return config


def to_trap_params(config: dict) -> TrapParams:
    trap = dict(config["trap"])
    trap["centers"] = tuple(trap["centers"])
    return TrapParams(**trap)


def to_physical_params(config: dict) -> PhysicalParams:
    try:
        trap = to_trap_params(config)
    except ValueError as e:
        raise ConfigError(f"[trap] {e}", key="trap") from e
    return PhysicalParams(trap=trap, **config["physical"])


def to_grid_spec(config: dict) -> GridSpec:
    grid = {k: v for k, v in config["grid"].items() if k != "threads"}
    return GridSpec(**grid)


def to_variational_settings(config: dict) -> VariationalSettings:
    return VariationalSettings(**config["variational"])


def explicit_keys(path=None) -> set:
    """Dotted keys set in the config file; empty without a file."""
    path = path or get_config_path()
    if path is None:
        return set()
    with open(path, "rb") as f:
        saved = tomllib.load(f)
    return {f"{section}.{key}" for section, values in saved.items() if isinstance(values, dict)
            for key in values}
