"""JSON run configuration: strict sections that map onto the library dataclasses.

Every physical quantity carries its unit in the key name (``_m``, ``_s``,
``_rad``, ``_mps``, ``_radps``); unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .bench import BenchConfig, EnvGenConfig
from .distributions import InitialDistribution
from .dynamics import MODELS, ControllerGains
from .errors import ConfigError
from .learner import TrainConfig
from .planner import PlannerConfig
from .probest import Obstacle
from .scenario import Scenario

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ObstacleSpec:
    center_m: tuple = ()
    radius_m: float = 0.0


@dataclass(frozen=True)
class UncertaintySpec:
    """Per-axis scales: standard deviations (gaussian) or half-widths (uniform)."""

    kind: str = "gaussian-truncated"
    pos_scale_m: float = 0.02
    heading_scale_rad: float = 0.02
    width_sigma: float = 4.0


@dataclass(frozen=True)
class DisturbanceSpec:
    kind: str = "gaussian-truncated"
    v_scale_mps: float = 0.02
    vz_scale_mps: float = 0.02
    omega_scale_radps: float = 0.02
    width_sigma: float = 4.0


@dataclass(frozen=True)
class ScenarioSection:
    model: str = "car"
    origin_pos_m: tuple = (1.0, 5.0)
    origin_heading_rad: float = 0.0
    dest_pos_m: tuple = (9.0, 5.0)
    dest_heading_rad: float = 0.0
    obstacles: tuple = ()
    horizon_steps: int = 200
    n_segments: int = 5
    dt_s: float = 0.02
    v_bounds_mps: tuple = (-4.0, 4.0)
    vz_bounds_mps: tuple = (-2.0, 2.0)
    omega_bounds_radps: tuple = (-2.0, 2.0)
    gains: dict = field(default_factory=lambda: {"k1": 1.0, "k2": 1.0, "k3": 1.0, "k4": 1.0})
    init_error: UncertaintySpec = UncertaintySpec()
    disturbance: DisturbanceSpec = DisturbanceSpec()
    gamma: float = 1e-4
    workspace_lo_m: tuple | None = (0.0, 0.0)
    workspace_hi_m: tuple | None = (10.0, 10.0)


@dataclass(frozen=True)
class ModelSection:
    n_traj: int = 5000
    n_steps: int = 50
    substeps: int = 2
    eval_frac: float = 0.2
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 0.03
    momentum: float = 0.9
    w_state: float = 1.0
    w_density: float = 1.0


@dataclass(frozen=True)
class PlannerSection:
    n_samples: int = 1000
    n_queries: int = 2000
    perturb_v_mps: float = 1.0
    perturb_vz_mps: float = 1.0
    perturb_omega_radps: float = 1.0
    resolution: int = 5
    max_attempts: int | None = None
    check: str = "density"
    distance_m: float = 0.0
    entry: str = "recenter"
    substeps: int = 2
    nlp_margin_m: float = 0.1


@dataclass(frozen=True)
class BenchSection:
    n_env: int = 10
    variants: tuple = ("original", "distance(0.1)", "distance(0.2)", "distance(1.0)", "reach", "density")
    n_mc: int = 100_000
    mc_substeps: int = 1
    n_obstacles: tuple = (4, 8)
    radius_m: tuple = (0.3, 0.8)
    region_lo_m: tuple | None = None
    region_hi_m: tuple | None = None
    endpoint_clearance_m: float = 0.5
    gap_m: float = 0.1


@dataclass(frozen=True)
class Config:
    schema_version: int = SCHEMA_VERSION
    scenario: ScenarioSection = ScenarioSection()
    model: ModelSection = ModelSection()
    planner: PlannerSection = PlannerSection()
    bench: BenchSection = BenchSection()

    # -- conversions to library objects
    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def build_scenario(self):
        try:
            return scenario_from_section(self.scenario)
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"scenario: {exc}") from exc

    def planner_config(self, seed=0):
        p, s = self.planner, self.scenario
        rng = (p.perturb_v_mps, p.perturb_vz_mps, p.perturb_omega_radps) if s.model == "hovercraft" \
            else (p.perturb_v_mps, p.perturb_omega_radps)
        try:
            return PlannerConfig(gamma=s.gamma, n_samples=p.n_samples, n_queries=p.n_queries, perturb_range=rng,
                                 resolution=p.resolution, max_attempts=p.max_attempts, seed=seed, check=p.check,
                                 distance_m=p.distance_m, entry=p.entry, substeps=p.substeps,
                                 nlp_margin=p.nlp_margin_m)
        except ValueError as exc:
            raise ConfigError(f"planner: {exc}") from exc

    def train_config(self, seed=0):
        m = self.model
        try:
            return TrainConfig(steps=m.steps, batch_size=m.batch_size, learning_rate=m.learning_rate,
                               momentum=m.momentum, seed=seed, w_state=m.w_state, w_density=m.w_density)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def bench_config(self, seed=0):
        b = self.bench
        try:
            gen = EnvGenConfig(n_obstacles=tuple(b.n_obstacles), radius_m=tuple(b.radius_m),
                               region_lo_m=b.region_lo_m, region_hi_m=b.region_hi_m,
                               endpoint_clearance_m=b.endpoint_clearance_m, gap_m=b.gap_m)
            return BenchConfig(self.planner_config(seed), b.n_mc, b.mc_substeps, seed), gen
        except ValueError as exc:
            raise ConfigError(f"bench: {exc}") from exc


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _uncertainty(spec, scales):
    scales = np.asarray(scales, dtype=float)
    if spec.kind == "gaussian-truncated":
        return InitialDistribution.gaussian(np.zeros_like(scales), scales, width=spec.width_sigma)
    if spec.kind == "uniform-box":
        return InitialDistribution.uniform(-scales, scales)
    raise ValueError(f"unknown distribution kind {spec.kind!r}")


def scenario_from_section(s):
    if s.model not in MODELS:
        raise ValueError(f"unknown model {s.model!r}")
    hover = s.model == "hovercraft"
    pos_dim = MODELS[s.model].pos_dim
    if len(s.origin_pos_m) != pos_dim or len(s.dest_pos_m) != pos_dim:
        raise ValueError(f"positions need {pos_dim} components")
    e, d = s.init_error, s.disturbance
    err_scales = [e.pos_scale_m] * pos_dim + [e.heading_scale_rad]
    dist_scales = [d.v_scale_mps, d.vz_scale_mps, d.omega_scale_radps] if hover else [d.v_scale_mps, d.omega_scale_radps]
    bounds = [s.v_bounds_mps, s.vz_bounds_mps, s.omega_bounds_radps] if hover else [s.v_bounds_mps, s.omega_bounds_radps]
    ws = None
    if s.workspace_lo_m is not None or s.workspace_hi_m is not None:
        if s.workspace_lo_m is None or s.workspace_hi_m is None:
            raise ValueError("workspace needs both bounds")
        ws = (s.workspace_lo_m, s.workspace_hi_m)
        if len(ws[0]) != pos_dim or len(ws[1]) != pos_dim:
            raise ValueError(f"workspace bounds need {pos_dim} components")
    if not s.gamma > 0:
        raise ValueError("gamma must be positive")
    return Scenario(
        model=s.model,
        q_origin=[*s.origin_pos_m, s.origin_heading_rad],
        q_dest=[*s.dest_pos_m, s.dest_heading_rad],
        obstacles=tuple(Obstacle(o.center_m, o.radius_m) for o in s.obstacles),
        horizon_steps=s.horizon_steps,
        n_segments=s.n_segments,
        dt=s.dt_s,
        u_min=[b[0] for b in bounds],
        u_max=[b[1] for b in bounds],
        gains=ControllerGains(**s.gains),
        init_error=_uncertainty(e, err_scales),
        disturbance=_uncertainty(d, dist_scales),
        gamma=s.gamma,
        workspace=ws,
        name="config",
    )


# ------------------------------------------------------------------ parsing


_NESTED = {
    (ScenarioSection, "init_error"): UncertaintySpec,
    (ScenarioSection, "disturbance"): DisturbanceSpec,
}


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) or (isinstance(default, int) and isinstance(value, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        if isinstance(default, int):
            raise ConfigError(f"{where}: expected an integer")
        return float(value)
    if isinstance(default, int):
        raise ConfigError(f"{where}: expected an integer")
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if isinstance(default, tuple) or default is None:
        if isinstance(value, list):
            return tuple(tuple(v) if isinstance(v, list) else v for v in value)
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return value
    return value


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    base = cls()
    kw = {}
    for k, v in data.items():
        sub = _NESTED.get((cls, k))
        path = f"{where}.{k}"
        if sub is not None:
            kw[k] = _section(sub, v, path)
        elif cls is ScenarioSection and k == "obstacles":
            if not isinstance(v, list):
                raise ConfigError(f"{path}: expected a list")
            kw[k] = tuple(_obstacle(o, f"{path}[{i}]") for i, o in enumerate(v))
        elif cls is ScenarioSection and k == "gains":
            gk = {"k1", "k2", "k3", "k4"}
            if not isinstance(v, dict) or set(v) - gk:
                raise ConfigError(f"{path}: expected an object with keys among k1..k4")
            kw[k] = {**base.gains, **{g: float(x) for g, x in v.items()}}
        else:
            kw[k] = _coerce(v, getattr(base, k), path)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _obstacle(o, path):
    if not isinstance(o, dict) or set(o) != {"center_m", "radius_m"}:
        raise ConfigError(f"{path}: expected an object with center_m and radius_m")
    spec = _section(ObstacleSpec, o, path)
    try:
        return ObstacleSpec(tuple(float(c) for c in spec.center_m), float(spec.radius_m))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    allowed = {"schema_version", "scenario", "model", "planner", "bench"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    cfg = Config(
        schema_version=version,
        scenario=_section(ScenarioSection, data.get("scenario", {}), "scenario"),
        model=_section(ModelSection, data.get("model", {}), "model"),
        planner=_section(PlannerSection, data.get("planner", {}), "planner"),
        bench=_section(BenchSection, data.get("bench", {}), "bench"),
    )
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every library object once so bad values fail early with exit code 2."""
    cfg.build_scenario()
    cfg.planner_config()
    cfg.train_config()
    cfg.bench_config()
    m = cfg.model
    if m.n_traj < 1 or m.n_steps < 1 or m.substeps < 1 or not 0 <= m.eval_frac < 1:
        raise ConfigError("model: n_traj, n_steps and substeps must be positive and eval_frac in [0, 1)")
    b = cfg.bench
    if b.n_env < 1 or b.n_mc < 1 or b.mc_substeps < 1:
        raise ConfigError("bench: n_env, n_mc and mc_substeps must be positive")
    from .bench import parse_variant

    for v in b.variants:
        try:
            parse_variant(v)
        except ValueError as exc:
            raise ConfigError(f"bench.variants: {exc}") from exc


def load_config(path=None):
    if path is None:
        return Config()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)
