"""TOML run-configuration loading with strict schema validation.

One structured UTF-8 file per run: nested sections for the scenario, the
maneuver/rollout/filter parameters, the simulation loop, and the output.
Unknown keys are errors (no silent typo absorption), and every message
names the offending dotted path.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

MODES = ("proposed", "baseline", "nominal-only")

_NUM = (int, float)


def _schema():
    """path -> (type tuple, default). Sections are nested dicts; a default
    of REQUIRED marks a key the user must supply."""
    return {
        "scenario": {
            "kind": (str, "uav"),
            "uav": {
                "gravity": (_NUM, 9.81),
                "obstacle_center": (list, [100.0, 0.0, 50.0]),
                "uav_radius": (_NUM, 1.0),
                "obstacle_radius": (_NUM, 20.0),
                "clearance_radius": (_NUM, 2.0),
                "v_bounds": (list, [15.0, 25.0]),
                "gamma_bounds": (list, [-0.3, 0.3]),
                "u_v_bounds": (list, [-5.0, 5.0]),
                "u_gamma_bounds": (list, [0.0, 19.62]),
                "u_psi_bounds": (list, [-5.0, 5.0]),
                "reference_center": (list, [0.0, 0.0]),
                "reference_radius": (_NUM, 100.0),
                "reference_altitude": (_NUM, 50.0),
                "reference_rate": (_NUM, 0.2),
                "initial_state": (list, [-100.0, 0.0, 50.0, 20.0, 0.0,
                                         -math.pi / 2]),
                "position_margin": (_NUM, 60.0),
            },
            "double_integrator": {
                "position_limit": (_NUM, 1.0),
                "u_bounds": (list, [-1.0, 1.0]),
                "v_bounds": (list, []),          # empty = no velocity box
                "initial_state": (list, [0.0, 0.5]),
                "reference_position": (_NUM, 0.0),
            },
        },
        "evading": {
            "epsilon": (_NUM, 0.0),              # 0 = derive from sampling
            "gain_samples": (int, 4096),
        },
        "zcbf": {
            "t_max": (_NUM, 15.0),
            "dt": (_NUM, 0.01),
            "dwell": (_NUM, 1.0),
        },
        "filter": {
            "r1": (_NUM, 1.0),
            "r2": (_NUM, 0.1),
            "alpha": (_NUM, 1.0),
            "dt": (_NUM, 0.05),
            "rd1_shrink": (_NUM, 0.98),
            "disable_solver": (bool, False),
        },
        "sim": {
            "duration": (_NUM, 70.0),
            "plant_dt": (_NUM, 0.01),
            "control_dt": (_NUM, 0.05),
            "mode": (str, "proposed"),
            "seed": (int, 0),
        },
        "output": {
            "log_path": (str, "run_log.csv"),
            "include_timing": (bool, False),
            "rollout_diagnostics": (bool, False),
        },
    }


@dataclass
class SimConfig:
    """Validated run configuration (plain nested dict + typed accessors)."""

    raw: dict = field(default_factory=dict)

    def __getitem__(self, dotted: str) -> Any:
        node = self.raw
        for part in dotted.split("."):
            node = node[part]
        return node

    @property
    def mode(self) -> str:
        return self.raw["sim"]["mode"]

    @property
    def duration(self) -> float:
        return float(self.raw["sim"]["duration"])


def _validate(node: Any, schema: dict, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{path or 'top level'}: expected a section (table)")
    out = {}
    for key, val in node.items():
        if key not in schema:
            raise ConfigError(f"unknown key '{path + key}'")
        spec = schema[key]
        if isinstance(spec, dict):
            out[key] = _validate(val, spec, path + key + ".")
        else:
            types, _default = spec
            if isinstance(val, bool) and types is not bool and bool not in (
                    types if isinstance(types, tuple) else (types,)):
                raise ConfigError(f"'{path + key}': boolean not valid here")
            if not isinstance(val, types):
                want = (types.__name__ if isinstance(types, type)
                        else "/".join(t.__name__ for t in types))
                raise ConfigError(
                    f"'{path + key}': expected {want}, got {type(val).__name__}"
                )
            out[key] = val
    for key, spec in schema.items():
        if key in out:
            continue
        if isinstance(spec, dict):
            out[key] = _validate({}, spec, path + key + ".")
        else:
            out[key] = spec[1]
    return out


def _check_values(cfg: dict):
    mode = cfg["sim"]["mode"]
    if mode not in MODES:
        raise ConfigError(f"'sim.mode': must be one of {MODES}, got {mode!r}")
    if cfg["sim"]["duration"] <= 0:
        raise ConfigError("'sim.duration': must be > 0")
    plant_dt = float(cfg["sim"]["plant_dt"])
    control_dt = float(cfg["sim"]["control_dt"])
    if plant_dt <= 0 or control_dt <= 0:
        raise ConfigError("'sim.plant_dt'/'sim.control_dt': must be > 0")
    if control_dt < plant_dt:
        raise ConfigError("'sim.control_dt': must be >= sim.plant_dt")
    ratio = control_dt / plant_dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ConfigError(
            "'sim.control_dt': must be an integer multiple of sim.plant_dt"
        )
    kind = cfg["scenario"]["kind"]
    if kind not in ("uav", "double_integrator"):
        raise ConfigError(
            f"'scenario.kind': must be 'uav' or 'double_integrator', got {kind!r}"
        )


def validate_config(data: dict) -> SimConfig:
    cfg = _validate(data, _schema(), "")
    _check_values(cfg)
    return SimConfig(raw=cfg)


def load_config(path: str) -> SimConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    return validate_config(data)


def default_config() -> SimConfig:
    return validate_config({})
