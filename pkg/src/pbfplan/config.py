"""JSON run configuration.

Lengths are given in mm or um and times in us in the file (as the key names
say); everything is converted to SI when the model objects are built.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class MaskConfig:
    path: str = "builtin:bridge_12x11.txt"  # relative to the config file, or builtin:<name>
    layers: int = 2
    voxel_size_mm: float = 0.2


@dataclass
class MaterialConfig:
    conductivity_W_mK: float = 31.1
    density_kg_m3: float = 7269.0
    specific_heat_J_kgK: float = 720.0


@dataclass
class EnvironmentConfig:
    convection_W_m2K: float = 10.0
    ambient_K: float = 300.0
    baseplate_K: float = 700.0
    initial_K: float = 700.0  # uniform initial temperature of every voxel


@dataclass
class LimitsConfig:
    solidus_K: float = 1658.0
    liquidus_K: float = 1723.0


@dataclass
class ScheduleConfig:
    build_steps: int = 40
    cool_steps: int = 0
    cycles: int = 1
    dt_us: float = 50.0
    power_min_W: float = 3000.0
    power_max_W: float = 3000.0


@dataclass
class BeamConfig:
    fwhm_um: float = 250.0
    tau_us: float = 1.0
    max_speed_m_s: float = 4000.0
    motion_substeps_per_us: int = 10
    dwell_us: int = 1
    window_us: float = 1000.0
    random_dwell_us: int = 1


@dataclass
class SolverConfig:
    kkt_tolerance: float = 1e-6
    max_iterations: int = 100
    regularization: float = 1e-8
    linear_solver: str = "nd"


@dataclass
class SimulationConfig:
    substeps: int = 50
    snapshots_us: list = field(default_factory=list)


@dataclass
class RunConfig:
    mask: MaskConfig = field(default_factory=MaskConfig)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    limits: LimitsConfig = field(default_factory=LimitsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    beam: BeamConfig = field(default_factory=BeamConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    seed: int = 0
    output_dir: str = "out"
    base_dir: str = field(default=".", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        kwargs = {}
        sections = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
        for key, value in data.items():
            if key not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            f = sections[key]
            sub = _SECTION_TYPES.get(key)
            if sub is not None:
                kwargs[key] = _build(sub, value, key)
            else:
                kwargs[key] = _coerce(value, f.type, key)
        cfg = cls(**kwargs, base_dir=str(base_dir))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        positive = [
            ("mask.voxel_size_mm", self.mask.voxel_size_mm),
            ("material.conductivity_W_mK", self.material.conductivity_W_mK),
            ("material.density_kg_m3", self.material.density_kg_m3),
            ("material.specific_heat_J_kgK", self.material.specific_heat_J_kgK),
            ("environment.ambient_K", self.environment.ambient_K),
            ("environment.baseplate_K", self.environment.baseplate_K),
            ("environment.initial_K", self.environment.initial_K),
            ("limits.solidus_K", self.limits.solidus_K),
            ("schedule.dt_us", self.schedule.dt_us),
            ("schedule.power_max_W", self.schedule.power_max_W),
            ("beam.fwhm_um", self.beam.fwhm_um),
            ("beam.max_speed_m_s", self.beam.max_speed_m_s),
            ("beam.window_us", self.beam.window_us),
            ("solver.kkt_tolerance", self.solver.kkt_tolerance),
        ]
        for name, v in positive:
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        ints = [
            ("mask.layers", self.mask.layers, 1),
            ("schedule.build_steps", self.schedule.build_steps, 1),
            ("schedule.cool_steps", self.schedule.cool_steps, 0),
            ("schedule.cycles", self.schedule.cycles, 1),
            ("beam.motion_substeps_per_us", self.beam.motion_substeps_per_us, 1),
            ("beam.dwell_us", self.beam.dwell_us, 1),
            ("beam.random_dwell_us", self.beam.random_dwell_us, 1),
            ("solver.max_iterations", self.solver.max_iterations, 1),
            ("simulation.substeps", self.simulation.substeps, 1),
        ]
        for name, v, lo in ints:
            if v < lo:
                raise ConfigError(f"{name} must be >= {lo}, got {v}")
        if self.environment.convection_W_m2K < 0:
            raise ConfigError("environment.convection_W_m2K must be >= 0")
        if self.beam.tau_us < 0:
            raise ConfigError("beam.tau_us must be >= 0")
        if self.limits.solidus_K > self.limits.liquidus_K:
            raise ConfigError("limits.solidus_K must not exceed limits.liquidus_K")
        if not 0 <= self.schedule.power_min_W <= self.schedule.power_max_W:
            raise ConfigError("need 0 <= schedule.power_min_W <= schedule.power_max_W")
        if self.solver.linear_solver not in ("nd", "qdldl", "splu"):
            raise ConfigError(f"unknown solver.linear_solver {self.solver.linear_solver!r}")
        if not self.mask.path.startswith("builtin:") and not self.mask_path().is_file():
            raise ConfigError(f"mask file not found: {self.mask_path()}")

    def mask_path(self):
        if self.mask.path.startswith("builtin:"):
            return self.mask.path
        p = Path(self.mask.path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_SECTION_TYPES = {
    "mask": MaskConfig,
    "material": MaterialConfig,
    "environment": EnvironmentConfig,
    "limits": LimitsConfig,
    "schedule": ScheduleConfig,
    "beam": BeamConfig,
    "solver": SolverConfig,
    "simulation": SimulationConfig,
}


def _coerce(value, typ, where):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if typ == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if typ == "list":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return [float(v) for v in value]
    return value


def _build(cls, value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in value.items():
        if k not in names:
            raise ConfigError(f"unknown key {where}.{k}")
        kwargs[k] = _coerce(v, names[k].type, f"{where}.{k}")
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(data, base_dir=path.parent)
