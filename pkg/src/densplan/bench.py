"""Randomised-environment benchmarks and the sample-efficiency study."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DensPlanError, GenerationExhausted, Infeasible
from .liouville import Reference
from .planner import PlannerConfig, default_predictor, plan
from .probest import Obstacle, OraclePredictor, mc_collision_prob, rng_for, total_risk
from .trajopt import DEFAULT_MARGIN, solve_nlp

log = logging.getLogger(__name__)


# -------------------------------------------------------------- environments


@dataclass(frozen=True)
class EnvGenConfig:
    """Obstacle layout generator; counts and radii are inclusive ranges."""

    n_obstacles: tuple = (4, 8)
    radius_m: tuple = (0.3, 0.8)
    region_lo_m: tuple | None = None
    region_hi_m: tuple | None = None
    endpoint_clearance_m: float = 0.5
    gap_m: float = 0.1
    max_place_tries: int = 200

    def __post_init__(self):
        lo, hi = self.n_obstacles
        if lo < 0 or hi < lo:
            raise ValueError("bad obstacle count range")
        rlo, rhi = self.radius_m
        if not 0 < rlo <= rhi:
            raise ValueError("bad obstacle radius range")


def _region(template, gen):
    p = template.vehicle.pos_dim
    if gen.region_lo_m is not None:
        return np.asarray(gen.region_lo_m, float), np.asarray(gen.region_hi_m, float)
    a, b = template.q_origin[:p], template.q_dest[:p]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    # central band around the origin-destination segment
    span = max(float(np.max(hi - lo)), 1.0)
    lo = lo + np.where(hi - lo > 0, 0.1875 * (hi - lo), -0.3 * span)
    hi = hi - np.where(hi - lo > 0, 0.1875 * (hi - lo), -0.3 * span)
    if template.workspace is not None:
        lo = np.maximum(lo, template.workspace[0])
        hi = np.minimum(hi, template.workspace[1])
    return lo, hi


def random_obstacles(template, gen, rng):
    """Non-overlapping obstacles clear of the origin and destination discs."""
    p = template.vehicle.pos_dim
    lo, hi = _region(template, gen)
    k = int(rng.integers(gen.n_obstacles[0], gen.n_obstacles[1] + 1))
    ends = [template.q_origin[:p], template.q_dest[:p]]
    obs = []
    for _ in range(gen.max_place_tries):
        if len(obs) == k:
            break
        c = rng.uniform(lo, hi)
        r = float(rng.uniform(*gen.radius_m))
        if any(np.linalg.norm(c - e) < r + gen.endpoint_clearance_m for e in ends):
            continue
        if any(np.linalg.norm(c - np.asarray(o.center)) < r + o.radius + gen.gap_m for o in obs):
            continue
        obs.append(Obstacle(tuple(c), r))
    return obs if len(obs) == k else None


@dataclass
class EnvSuite:
    scenarios: list
    seed: int
    attempts: int
    nlp_feasible: list = field(default_factory=list)

    def __len__(self):
        return len(self.scenarios)


def gen_envs(n, template, seed=0, gen=EnvGenConfig()):
    """Rejection-sample ``n`` layouts whose initial NLP is feasible."""
    if n < 1:
        raise ValueError("n must be positive")
    out = []
    for attempt in range(100 * n):
        if len(out) == n:
            break
        obs = random_obstacles(template, gen, rng_for(seed, attempt))
        if obs is None:
            continue
        sc = replace(template.with_obstacles(obs), name=f"{template.name}-{seed}-{attempt}")
        _, rep = solve_nlp(sc, raise_on_infeasible=False)
        if rep.feasible:
            out.append(sc)
    else:
        attempt = 100 * n
    if len(out) < n:
        raise GenerationExhausted(f"only {len(out)} of {n} environments after {100 * n} attempts")
    return EnvSuite(out, int(seed), attempt, [True] * n)


# ------------------------------------------------------------------ variants


_VARIANT = re.compile(r"^(original|reach|density|distance)(?:[(:]([0-9.eE+-]+)\)?)?$")


def parse_variant(name):
    """``"distance(0.2)"`` -> ``("distance", 0.2)``; other variants carry ``None``."""
    m = _VARIANT.match(name.strip())
    if not m or (m.group(1) == "distance") != (m.group(2) is not None):
        raise ValueError(f"bad variant {name!r}")
    return m.group(1), None if m.group(2) is None else float(m.group(2))


def variant_config(variant, base):
    kind, d = parse_variant(variant)
    if kind == "original":
        # the unchecked baseline is the plain NLP solution
        return replace(base, check="none", nlp_margin=DEFAULT_MARGIN)
    if kind == "distance":
        return replace(base, check="distance", distance_m=d)
    return replace(base, check=kind)


@dataclass(frozen=True)
class BenchConfig:
    planner: PlannerConfig = PlannerConfig()
    n_mc: int = 100_000
    mc_substeps: int = 1
    mc_seed: int = 0


@dataclass
class RunRecord:
    env: int
    variant: str
    feasible: bool
    collision_rate: float | None
    total_risk: float | None
    repairs: int | None
    failure: str | None
    failed_segment: int | None
    trace: dict | None
    runtime_s: float = 0.0

    def to_dict(self):
        # runtime is deliberately left out: artifacts must be reproducible byte for byte
        return {
            "env": self.env,
            "variant": self.variant,
            "feasible": self.feasible,
            "collision_rate": self.collision_rate,
            "total_risk": self.total_risk,
            "repairs": self.repairs,
            "failure": self.failure,
            "failed_segment": self.failed_segment,
            "trace": self.trace,
        }


@dataclass
class BenchResult:
    variant: str
    records: list

    @property
    def feasibility(self):
        return sum(r.feasible for r in self.records) / len(self.records) if self.records else float("nan")

    @property
    def safety(self):
        """Mean Monte Carlo collision rate over feasible runs (nan if none)."""
        rates = [r.collision_rate for r in self.records if r.feasible]
        return float(np.mean(rates)) if rates else float("nan")

    @property
    def runtimes(self):
        return [r.runtime_s for r in self.records]

    def summary(self):
        return {"variant": self.variant, "n_env": len(self.records), "feasibility": self.feasibility,
                "safety": self.safety}


def run_env(variant, idx, sc, cfg, predictor=None):
    pcfg = replace(variant_config(variant, cfg.planner), seed=int(cfg.planner.seed) * 7919 + idx)
    pred = predictor(sc, pcfg) if predictor is not None else default_predictor(sc, pcfg)
    t0 = time.perf_counter()
    try:
        trace = plan(sc, pred, pcfg)
    except (Infeasible, DensPlanError) as exc:
        seg = getattr(exc, "segment", None)
        log.info("env %d variant %s failed: %s", idx, variant, exc)
        return RunRecord(idx, variant, False, None, None, None, type(exc).__name__, seg, None,
                         time.perf_counter() - t0)
    mc = mc_collision_prob(sc.loop, trace.reference, sc.init_error, sc.disturbance, sc.obstacles,
                           cfg.n_mc, seed=rng_for(cfg.mc_seed, idx).integers(2**31), substeps=cfg.mc_substeps)
    return RunRecord(idx, variant, True, float(mc.any_collision), trace.total_risk, trace.repairs, None, None,
                     trace.to_dict(), time.perf_counter() - t0)


def run_variant(variant, suite, cfg=BenchConfig(), predictor=None):
    """Plan every environment of ``suite`` with one variant and Monte-Carlo check the results.

    ``predictor(scenario, planner_cfg)`` builds the density predictor; the
    Liouville oracle is used by default.
    """
    parse_variant(variant)
    scenarios = suite.scenarios if isinstance(suite, EnvSuite) else list(suite)
    records = [run_env(variant, i, sc, cfg, predictor) for i, sc in enumerate(scenarios)]
    return BenchResult(variant, records)


# ------------------------------------------------------- sample efficiency


@dataclass
class EfficiencyRow:
    size: int
    density: list
    monte_carlo: list

    @staticmethod
    def _spread(v):
        q = np.percentile(v, [25, 75])
        return float(q[1] - q[0])

    def to_dict(self):
        return {
            "size": self.size,
            "density_median": float(np.median(self.density)),
            "density_iqr": self._spread(self.density),
            "mc_median": float(np.median(self.monte_carlo)),
            "mc_iqr": self._spread(self.monte_carlo),
            "density": [float(v) for v in self.density],
            "monte_carlo": [float(v) for v in self.monte_carlo],
        }


def sample_efficiency_study(scenario, controls, sizes, seeds, n_queries=2000, substeps=2, mc=True):
    """Density-estimator and Monte Carlo risk for each sample size and seed.

    ``controls`` are the per-segment reference controls to evaluate.  Both
    estimators report the summed per-step risk of the whole horizon.
    """
    sc = scenario
    ref = Reference.from_segments(sc.vehicle, sc.q_origin, controls, sc.seg_len, sc.dt)
    pred = OraclePredictor(sc.loop, sc.dt, substeps)
    rows = []
    for n in sizes:
        dens, mcs = [], []
        for s in seeds:
            rep = total_risk(pred, ref, sc.seg_len, sc.joint_dist, sc.obstacles, n, n_queries, seed=s)
            dens.append(rep.total_raw)
            if mc:
                m = mc_collision_prob(sc.loop, ref, sc.init_error, sc.disturbance, sc.obstacles, n, seed=s,
                                      substeps=substeps)
                mcs.append(m.total_raw)
        rows.append(EfficiencyRow(int(n), dens, mcs))
    return rows


def importance_oracle(scenario, controls, n=200_000, seed=12345, substeps=2):
    """High-accuracy reference risk via importance-weighted rollouts."""
    sc = scenario
    ref = Reference.from_segments(sc.vehicle, sc.q_origin, controls, sc.seg_len, sc.dt)
    return mc_collision_prob(sc.loop, ref, sc.init_error, sc.disturbance, sc.obstacles, n, seed=seed,
                             substeps=substeps, importance=True)
