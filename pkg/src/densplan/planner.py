"""Segment-wise check / perturb / re-solve planning loop.

The NLP proposes per-segment reference controls.  Segments are verified in
order; an unsafe segment is replaced by the first safe perturbation of its
control (smallest ``|du|`` first), the anchor moves to the end of the
accepted segment and the remainder of the horizon is re-solved from there.

Segment anchors are the states of the plan's Euler recurrence.  Within a
segment the executed reference is the exact (RK4) solution of the vehicle ODE
from its anchor.  Every segment is checked against exactly the reference it
will follow, so the recorded risks refer to the trajectory Monte Carlo replays.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import Infeasible, PlanFailed, RepairFailed
from .dynamics import state_from_error, tracking_error
from .liouville import PiecewiseReference, Reference
from .probest import OraclePredictor, cloud_risks, push_forward, rng_for, sample_initial
from .trajopt import DEFAULT_MARGIN, euler_rollout, min_clearance, rollout, solve_nlp, terminal_error

log = logging.getLogger(__name__)

CHECKS = ("density", "reach", "distance", "none")
ENTRY_MODES = ("recenter", "push")


@dataclass(frozen=True)
class PlannerConfig:
    gamma: float = 1e-4
    n_samples: int = 1000
    n_queries: int = 2000
    perturb_range: tuple = (1.0, 1.0)
    resolution: int = 5
    max_attempts: int | None = None
    seed: int = 0
    check: str = "density"
    distance_m: float = 0.0
    entry: str = "recenter"
    substeps: int = 2
    ref_substeps: int = 10
    nlp_margin: float = 0.1

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError("gamma must be non-negative")
        if self.resolution < 3 or self.resolution % 2 == 0:
            raise ValueError("resolution must be odd and >= 3 so du = 0 is a grid level")
        if self.check not in CHECKS:
            raise ValueError(f"unknown check {self.check!r}")
        if self.entry not in ENTRY_MODES:
            raise ValueError(f"unknown entry mode {self.entry!r}")
        if np.any(np.asarray(self.perturb_range, dtype=float) < 0):
            raise ValueError("perturbation range must be non-negative")
        if self.n_samples < 2 or self.n_queries < 1:
            raise ValueError("need at least two samples and one query")
        if self.nlp_margin < 0:
            raise ValueError("nlp_margin must be non-negative")
        if self.max_attempts is not None and self.max_attempts < 1:
            raise ValueError("max_attempts must be positive")


def perturb_segment(u, cfg, u_min=None, u_max=None):
    """Candidate controls ``u + du`` on the R-level grid, smallest ``|du|`` first.

    ``du = 0`` is excluded.  With bounds given, candidates are clipped and
    duplicates (including ones clipped back onto ``u``) are dropped.
    """
    u = np.asarray(u, dtype=float)
    rng_ = np.broadcast_to(np.asarray(cfg.perturb_range, dtype=float), u.shape)
    axes = [np.linspace(-r, r, cfg.resolution) for r in rng_]
    grid = np.array(list(itertools.product(*axes)))
    grid = grid[np.any(grid != 0, axis=1)]
    order = np.argsort(np.linalg.norm(grid, axis=1), kind="stable")
    out, seen = [], {tuple(u)}
    for du in grid[order]:
        c = u + du
        if u_min is not None or u_max is not None:
            c = np.clip(c, u_min, u_max)
        key = tuple(c)
        if key in seen:
            continue
        seen.add(key)
        out.append(c)
        if cfg.max_attempts is not None and len(out) >= cfg.max_attempts:
            break
    return out


@dataclass
class SegmentCheck:
    risk: float
    safe: bool
    per_step: np.ndarray | None = None
    end_cloud: tuple | None = None


def check_segment(ref, entry, obstacles, predictor, cfg, seed):
    """Risk of following ``ref`` (one segment) from the ``entry`` distribution.

    ``entry`` is either a distribution (sampled uniformly over its support) or
    a ``(points, log_density)`` pair carried over from the previous segment.
    """
    L = ref.n_steps
    if cfg.check == "none":
        return SegmentCheck(0.0, True)
    if cfg.check == "distance":
        clear = min_clearance(ref.states, obstacles, len(obstacles[0].center)) if obstacles else np.inf
        return SegmentCheck(0.0, bool(clear >= cfg.distance_m))
    if isinstance(entry, tuple):
        pts, logr = entry
    else:
        pts, logr = sample_initial(entry, cfg.n_samples, rng_for(seed, 0))
    n_err = ref.model.state_dim
    cloud = push_forward(predictor, pts, logr, n_err, ref.controls[0], L, ref.states)
    per = cloud_risks(cloud, list(obstacles), cfg.n_queries, seed)
    risk = float(sum(float(v) for v in per.ravel()))
    gamma = 0.0 if cfg.check == "reach" else cfg.gamma
    end = cloud.at(L)
    return SegmentCheck(risk, risk <= gamma, per, (end.points, end.log_density))


@dataclass
class SegmentRecord:
    index: int
    verdict: str             # "safe" | "repaired"
    risk: float
    control: np.ndarray
    nominal_control: np.ndarray
    candidates_tried: int = 0
    endpoint_deviation: float = 0.0

    def to_dict(self):
        return {
            "index": self.index,
            "verdict": self.verdict,
            "risk": self.risk,
            "control": self.control.tolist(),
            "nominal_control": self.nominal_control.tolist(),
            "candidates_tried": self.candidates_tried,
            "endpoint_deviation_m": self.endpoint_deviation,
        }


@dataclass
class PlanTrace:
    segments: list
    controls: np.ndarray
    plan: object                  # Euler SegmentedPlan from the origin
    reference: PiecewiseReference # executed reference, restarted at each anchor
    nlp_solves: int
    repairs: int
    terminal_error: float         # of the Euler plan
    meta: dict = field(default_factory=dict)

    @property
    def total_risk(self):
        return float(sum(s.risk for s in self.segments))

    @property
    def verdicts(self):
        return [s.verdict for s in self.segments]

    @property
    def risks(self):
        return [s.risk for s in self.segments]

    def to_dict(self):
        return {
            "segments": [s.to_dict() for s in self.segments],
            "controls": self.controls.tolist(),
            "nlp_solves": self.nlp_solves,
            "repairs": self.repairs,
            "total_risk": self.total_risk,
            "terminal_error_m": self.terminal_error,
            "meta": self.meta,
        }


def default_predictor(scenario, cfg):
    return OraclePredictor(scenario.loop, scenario.dt, cfg.substeps)


def repair_segment(u, anchor, scenario, entry, predictor, cfg, seed, accept=None):
    """First candidate for the segment at ``anchor`` that passes the check.

    ``accept(candidate)`` may veto an otherwise safe candidate (the planner
    uses it to skip candidates whose remaining horizon has no feasible NLP
    solution); it returns a payload passed back to the caller or raises
    :class:`Infeasible`.
    """
    L = scenario.seg_len
    tried = 0
    for tried, cand in enumerate(perturb_segment(u, cfg, scenario.u_min, scenario.u_max), 1):
        ref = Reference(scenario.vehicle, anchor, np.repeat(cand[None], L, 0), scenario.dt, cfg.ref_substeps)
        res = check_segment(ref, entry, scenario.obstacles, predictor, cfg, seed)
        if not res.safe:
            continue
        try:
            payload = accept(cand) if accept is not None else None
        except Infeasible:
            log.info("candidate %d is safe but leaves an infeasible remainder", tried)
            continue
        return cand, ref, res, tried, payload
    raise RepairFailed(f"none of {tried} candidates passed the check")


def _carry_cloud(cloud, old_ref_end, new_anchor, n_err):
    # re-express pushed errors w.r.t. the next anchor; this map has unit Jacobian
    pts, logr = cloud
    world = state_from_error(pts[:, :n_err], old_ref_end)
    pts = pts.copy()
    pts[:, :n_err] = tracking_error(world, new_anchor)
    return pts, logr


def _solve(scenario, cfg, warm_start=None):
    # planner solves keep extra clearance so a segment is not handed over ending
    # against an obstacle; fall back to the bare NLP margin when that is infeasible
    try:
        return solve_nlp(scenario, warm_start=warm_start, seed=cfg.seed, margin=cfg.nlp_margin)[0]
    except Infeasible:
        if cfg.nlp_margin <= DEFAULT_MARGIN:
            raise
    return solve_nlp(scenario, warm_start=warm_start, seed=cfg.seed)[0]


def plan(scenario, predictor=None, cfg=PlannerConfig()):
    """Check every segment of the NLP reference, repairing and re-solving as needed.

    Segment ``j`` is anchored at the Euler state reached by the accepted
    controls of segments ``0..j-1``; the executed reference restarts there.
    Raises :class:`PlanFailed` when a segment cannot be repaired and lets
    :class:`Infeasible` from the NLP propagate.
    """
    sc = scenario
    N, L = sc.n_segments, sc.seg_len
    n_err = sc.vehicle.state_dim
    predictor = default_predictor(sc, cfg) if predictor is None else predictor
    nlp = _solve(sc, cfg)
    solves = [1]
    pending, first = nlp.controls, 0
    anchor = sc.q_origin.copy()
    anchors = []
    entry = sc.joint_dist
    records, repairs = [], 0
    for j in range(N):
        anchors.append(anchor)
        u = pending[j - first]
        seed = int(cfg.seed) * 1000 + j
        ref = Reference(sc.vehicle, anchor, np.repeat(u[None], L, 0), sc.dt, cfg.ref_substeps)
        res = check_segment(ref, entry, sc.obstacles, predictor, cfg, seed)
        if res.safe:
            records.append(SegmentRecord(j, "safe", res.risk, u.copy(), u.copy()))
        else:
            log.info("segment %d unsafe (risk %.3g), perturbing", j, res.risk)

            def remainder(cand, j=j, anchor=anchor, warm=pending[j + 1 - first :]):
                # anchor moved: re-solve the rest of the horizon from the candidate's end
                if j + 1 >= N:
                    return None
                end = euler_rollout(sc.vehicle, anchor, np.repeat(cand[None], L, 0), sc.dt)[-1]
                solves[0] += 1
                return _solve(sc.remainder(end, j + 1), cfg, warm)

            try:
                cand, cref, res, tried, rest = repair_segment(u, anchor, sc, entry, predictor, cfg, seed, remainder)
            except RepairFailed as exc:
                raise PlanFailed(j, f"segment {j} could not be repaired: {exc}") from exc
            dev = float(np.linalg.norm(cref.states[-1, : sc.vehicle.pos_dim] - ref.states[-1, : sc.vehicle.pos_dim]))
            records.append(SegmentRecord(j, "repaired", res.risk, cand, u.copy(), tried, dev))
            repairs += 1
            ref = cref
            if rest is not None:
                pending, first = rest.controls, j + 1
        nxt = euler_rollout(sc.vehicle, anchor, np.repeat(records[-1].control[None], L, 0), sc.dt)[-1]
        if cfg.entry == "push" and res.end_cloud is not None:
            entry = _carry_cloud(res.end_cloud, ref.states[-1], nxt, n_err)
        anchor = nxt
    controls = np.array([r.control for r in records])
    reference = PiecewiseReference(sc.vehicle, np.array(anchors), controls, L, sc.dt, cfg.ref_substeps)
    euler = rollout(controls, sc)
    p = sc.vehicle.pos_dim
    return PlanTrace(
        records, controls, euler, reference, solves[0], repairs,
        terminal_error(euler.states, sc.q_dest, p),
        meta={"check": cfg.check, "gamma": cfg.gamma, "entry": cfg.entry,
              "reference_terminal_error_m": terminal_error(reference.states, sc.q_dest, p)},
    )
