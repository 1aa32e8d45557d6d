"""Experiment configuration: nested dataclasses with JSON round-trip and
dotted-path overrides.

All angles are radians and all times seconds; the commonly quoted noise
level 0.345 degrees / 3 ns is the default online noise model.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .envsim import EnvironmentSpec, NoiseModel
from .localizer import OnlineConfig

CONFIG_VERSION = 1

DEFAULT_SIGMA_THETA = 0.345 * math.pi / 180.0
DEFAULT_SIGMA_TAU = 3e-9


class ConfigError(ValueError):
    """Bad configuration content (exit code 2 in the CLI)."""


@dataclass
class OfflineConfig:
    """Offline phase: test-point placement and map construction."""

    spacing: float = 2.0          # arc-length gap between boundary test points, m
    offset: float = 0.5           # inward inset of the test-point loop, m
    n_r: int = 3                  # activated paths per test point
    alpha: float = 0.2            # recovery relaxation constant
    iterations: int = 10
    lambda_m: float = 1.0         # band limit, cycles/m
    epsilon: float = 0.05         # covering-sheaf miss probability
    grid_pitch: float = 0.25      # map grid pitch, m
    grid_pad: float = 5.0         # padding around the RoL bounding box, m
    density_weights: bool = True  # inverse-multiplicity sample weights


@dataclass
class ScoreConfig:
    """Scoring and pre-localization knobs carried into ScoreContext."""

    combine: str = "per_path"
    var_floor: float | None = None   # std dev in m; None -> sheaf pitch / 2
    k_sigma: float = 3.0
    delta_floor: float = 0.05        # sector half-width floor, rad
    prelocalize_pitch: float = 1.0
    field_weighted_cells: bool = False   # weight score cells by the recovered field


@dataclass
class CdfConfig:
    """Parameter grid for the error-CDF experiment."""

    noise_scales: list = field(default_factory=lambda: [2.0, 1.0, 0.5])
    n_r_values: list = field(default_factory=lambda: [2, 4, 8])
    trials: int = 1000
    small_rol_side: float = 12.0     # RoL override used when n_r <= 2
    user_bs_clearance: float = 3.0


@dataclass
class BoundsConfig:
    """Bound sweep plus Monte Carlo dominance ensembles."""

    ratios: list = field(default_factory=lambda: [15.9, 31.8])
    n_r: int = 3
    structures: int = 100
    epsilon: float = 0.05
    sweep_n_r: list = field(default_factory=lambda: [1, 2, 3, 4])
    sweep_ratio_min: float = 1.0
    sweep_ratio_max: float = 100.0
    sweep_points: int = 40
    region_side: float = 200.0
    disk_radius: float = 2.0


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    out_dir: str = "runs"
    environment: EnvironmentSpec = field(default_factory=lambda: EnvironmentSpec(
        family="rectangle", width=60.0, height=60.0, wall_spacing=2.0, rol_margin=5.0))
    noise: NoiseModel = field(default_factory=lambda: NoiseModel(
        sigma_theta=DEFAULT_SIGMA_THETA, sigma_tau=DEFAULT_SIGMA_TAU, seed=0))
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    online: OnlineConfig = field(default_factory=lambda: OnlineConfig(
        n_starts=8, dx=0.25, tol=0.01, max_iter=80, backtracking=True))
    cdf: CdfConfig = field(default_factory=CdfConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    # cmd_localize: explicit user position, else seeded random draw
    user: list | None = None


_SECTION_TYPES = {
    "environment": EnvironmentSpec,
    "noise": NoiseModel,
    "offline": OfflineConfig,
    "score": ScoreConfig,
    "online": OnlineConfig,
    "cdf": CdfConfig,
    "bounds": BoundsConfig,
}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    data = dict(data)
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {data.get('version')!r}")
    for key, cls in _SECTION_TYPES.items():
        if key in data and isinstance(data[key], dict):
            data[key] = _build(cls, data[key])
    return _build(ExperimentConfig, data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(config_to_json(cfg))


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply 'section.field=value' overrides; values parse as JSON literals
    with a plain-string fallback."""
    data = config_to_dict(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override path {key!r} does not exist")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override path {key!r} does not exist")
        node[parts[-1]] = value
    return config_from_dict(data)
