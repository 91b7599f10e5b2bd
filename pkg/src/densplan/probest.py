"""Sample-based reach-set probabilities, collision risk and Monte Carlo baselines.

Pipeline for one time step:

1. draw initial points uniformly over the support of the joint
   (tracking error, disturbance) distribution and record their log-density;
2. push them forward with a predictor (Liouville oracle or learned model),
   which also returns the log-density change along each trajectory;
3. approximate the reachable set by an r-inflated union of balls around the
   pushed points (in per-dimension normalized coordinates) and draw uniform
   query points from it;
4. weight each query by the density of its nearest pushed sample and return
   the weighted fraction that falls in the region of interest.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .dynamics import state_from_error, tracking_error
from .errors import EmptySupport
from .hull import ProjectedHull
from .liouville import DEFAULT_SUBSTEPS, integrate_augmented, simulate_rollout

log = logging.getLogger(__name__)

MIN_ACCEPTANCE = 1e-3
NEIGHBOR_RANK = 1


def rng_for(seed, *keys):
    return np.random.default_rng([int(seed), *map(int, keys)])


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("obstacle radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def contains(self, positions):
        c = np.asarray(self.center)
        return np.sum((np.asarray(positions)[..., : c.size] - c) ** 2, axis=-1) <= self.radius**2


# ---------------------------------------------------------------- predictors


class OraclePredictor:
    """Ground-truth push-forward by integrating the augmented Liouville ODE."""

    horizon_steps = None

    def __init__(self, system, dt, substeps=DEFAULT_SUBSTEPS):
        self.system = system
        self.dt = dt
        self.substeps = substeps

    def push(self, e0, dist, u_ref, n_steps):
        e0 = np.atleast_2d(e0)
        if u_ref is not None:
            u_ref = np.broadcast_to(np.asarray(u_ref, dtype=float), (n_steps,) + np.shape(u_ref))
        tr = integrate_augmented(self.system, e0, 0.0, u_ref, dist, n_steps, self.dt, self.substeps)
        return tr.errors, tr.log_densities


# ------------------------------------------------------------------ samples


def sample_initial(dist, n, seed):
    """Uniform draws over the support of ``dist`` with their log-densities."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    pts = dist.sample_uniform(rng, n)
    return pts, dist.log_density(pts)


@dataclass
class DensitySample:
    """Pushed points at one time step.

    ``points`` are rows of (error, disturbance) so the density lives on the
    joint space; ``n_err`` says where the error block ends.  ``ref_state`` is
    the reference world state at this step (None for abstract systems).
    """

    points: np.ndarray
    log_density: np.ndarray
    n_err: int
    ref_state: np.ndarray | None = None
    step: int = 0

    @property
    def errors(self):
        return self.points[:, : self.n_err]

    @property
    def densities(self):
        return np.exp(self.log_density)

    def world(self, errors=None):
        errors = self.errors if errors is None else errors
        if self.ref_state is None:
            return errors
        return state_from_error(errors, self.ref_state)


@dataclass
class PushedCloud:
    """Push-forward of one set of initial samples over several steps."""

    errors: np.ndarray          # (T+1, n, n_err)
    dist: np.ndarray | None     # (n, n_dist)
    log_density: np.ndarray     # (T+1, n)
    ref_states: np.ndarray | None = None

    @property
    def n_steps(self):
        return self.errors.shape[0] - 1

    def at(self, k):
        pts = self.errors[k] if self.dist is None else np.hstack([self.errors[k], self.dist])
        ref = None if self.ref_states is None else self.ref_states[k]
        return DensitySample(pts, self.log_density[k], self.errors.shape[2], ref, k)


def push_forward(predictor, points, log_rho0, n_err, u_ref, n_steps, ref_states=None):
    """Map initial (error, disturbance) rows and their log-densities forward."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    e0 = points[:, :n_err]
    dist = points[:, n_err:] if points.shape[1] > n_err else None
    errs, g = predictor.push(e0, dist, u_ref, n_steps)
    return PushedCloud(errs, dist, np.asarray(log_rho0)[None, :] + g, ref_states)


# ------------------------------------------------------ support + estimation


class SupportApprox:
    """r-inflated union of balls around samples, in normalized coordinates.

    Dimensions with zero spread (e.g. a point-mass disturbance) are dropped
    from the geometry and restored as constants in the query points.
    """

    def __init__(self, points, radius=None, scale=None):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self.n, self.dim = points.shape
        self.center = points.mean(axis=0)
        if scale is None:
            scale = points.std(axis=0)
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (self.dim,)).copy()
        self.active = scale > 1e-12 * max(1.0, float(np.max(np.abs(points)))) if self.n > 1 else np.zeros(self.dim, bool)
        scale[~self.active] = 1.0
        self.scale = scale
        self.z = (points[:, self.active] - self.center[self.active]) / scale[self.active]
        self.tree = cKDTree(self.z) if self.active.any() else None
        if radius is None:
            radius = self._default_radius()
        self.radius = float(radius)
        if self.active.any():
            self.lo = self.z.min(axis=0) - self.radius
            self.hi = self.z.max(axis=0) + self.radius

    def _default_radius(self):
        if self.tree is None or self.n < 2:
            return 1.0
        k = min(NEIGHBOR_RANK, self.n - 1)
        dist, _ = self.tree.query(self.z, k=k + 1)
        r = float(np.mean(dist[:, k]))
        return r if r > 0 else 1e-9

    def to_points(self, z):
        out = np.tile(self.center, (len(z), 1))
        out[:, self.active] = self.center[self.active] + z * self.scale[self.active]
        return out

    def nearest(self, z):
        """Index of the nearest sample, ties going to the lowest index."""
        if self.tree is None:
            return np.zeros(len(z), dtype=int), np.zeros(len(z))
        k = min(2, self.n)
        d, i = self.tree.query(z, k=k)
        if k == 1:
            return i, d
        tie = d[:, 1] <= d[:, 0]
        idx = np.where(tie, np.minimum(i[:, 0], i[:, 1]), i[:, 0])
        return idx, d[:, 0]

    def draw_queries(self, rng, n_queries):
        """Uniform queries over the union of balls.

        A ball is picked uniformly, a point is drawn uniformly inside it and
        kept with probability ``1 / (number of balls covering it)``; accepted
        points are then exactly uniform on the union.
        """
        if self.tree is None:
            # every sample coincides: the support is a single point
            return self.to_points(np.zeros((n_queries, 0))), np.zeros(n_queries, dtype=int)
        d = int(self.active.sum())
        got_z, got_i = [], []
        have = drawn = 0
        batch = max(n_queries, 1024)
        while have < n_queries:
            centers = self.z[rng.integers(0, self.n, batch)]
            g = rng.standard_normal((batch, d))
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            z = centers + g * (self.radius * rng.random(batch) ** (1.0 / d))[:, None]
            cover = self.tree.query_ball_point(z, self.radius, return_length=True)
            keep = rng.random(batch) * np.maximum(cover, 1) < 1.0
            drawn += batch
            z = z[keep]
            got_z.append(z)
            got_i.append(self.nearest(z)[0])
            have += len(z)
            if drawn >= 4 * batch and have < MIN_ACCEPTANCE * drawn:
                raise EmptySupport(f"query acceptance {have}/{drawn} below {MIN_ACCEPTANCE:g}")
        z = np.concatenate(got_z)[:n_queries]
        idx = np.concatenate(got_i)[:n_queries]
        return self.to_points(z), idx


def interp_density(points, densities, query, scale=None):
    """Nearest-neighbour density interpolation in normalized coordinates."""
    approx = SupportApprox(points, radius=1.0, scale=scale)
    query = np.atleast_2d(np.asarray(query, dtype=float))
    z = (query[:, approx.active] - approx.center[approx.active]) / approx.scale[approx.active]
    idx, _ = approx.nearest(z)
    return np.asarray(densities)[idx]


def _weighted_fraction(weights, member):
    total = weights.sum()
    if not total > 0:
        raise EmptySupport("all query weights vanished")
    return float(np.clip((weights * member).sum() / total, 0.0, 1.0))


def _query_weights(log_density, idx):
    ld = np.asarray(log_density)[idx]
    return np.exp(ld - ld.max())


def estimate_reach_prob(sample, region, n_queries=2000, seed=0, radius=None, scale=None):
    """Probability that the state lies in ``region`` (a predicate on points)."""
    if n_queries < 1:
        raise ValueError("n_queries must be positive")
    points = sample.points if isinstance(sample, DensitySample) else np.atleast_2d(sample)
    log_density = sample.log_density if isinstance(sample, DensitySample) else None
    if log_density is None:
        raise TypeError("estimate_reach_prob needs a DensitySample")
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    approx = SupportApprox(points, radius=radius, scale=scale)
    queries, idx = approx.draw_queries(rng, n_queries)
    if len(queries) == 0:
        raise EmptySupport("no query landed in the support approximation")
    member = np.asarray(region(queries), dtype=bool)
    return _weighted_fraction(_query_weights(log_density, idx), member)


def _max_offset(approx, pos_dim):
    # largest |e_pos| over the query bounding box; the body-frame rotation
    # preserves norms, so this bounds every query's distance to the reference
    lo = approx.to_points(approx.lo[None, :])[0] if approx.tree is not None else approx.center
    hi = approx.to_points(approx.hi[None, :])[0] if approx.tree is not None else approx.center
    corner = np.maximum(np.abs(lo[:pos_dim]), np.abs(hi[:pos_dim]))
    return float(np.linalg.norm(corner))


def step_collision_probs(sample, obstacles, n_queries=2000, seed=0, radius=None):
    """``P_t(O_i)`` for every obstacle at one step, sharing one query set.

    Obstacles provably out of reach of every possible query are assigned an
    exact zero without sampling.
    """
    probs = np.zeros(len(obstacles))
    if not obstacles:
        return probs
    approx = SupportApprox(sample.points, radius=radius)
    pos_dim = len(obstacles[0].center)
    ref_pos = np.zeros(pos_dim) if sample.ref_state is None else np.asarray(sample.ref_state[:pos_dim])
    reach = _max_offset(approx, pos_dim)
    live = [
        i for i, ob in enumerate(obstacles)
        if np.linalg.norm(ref_pos - ob.center) - ob.radius <= reach
    ]
    if not live:
        return probs
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    queries, idx = approx.draw_queries(rng, n_queries)
    w = _query_weights(sample.log_density, idx)
    pos = sample.world(queries[:, : sample.n_err])[:, :pos_dim]
    for i in live:
        probs[i] = _weighted_fraction(w, obstacles[i].contains(pos))
    return probs


def collision_prob(sample, obstacle, n_queries=2000, seed=0, radius=None):
    return float(step_collision_probs(sample, [obstacle], n_queries, seed, radius)[0])


@dataclass
class RiskReport:
    """Per-(step, obstacle) collision probabilities and their sum."""

    steps: list
    per_step: np.ndarray
    variant: str
    n_samples: int
    n_queries: int | None = None
    any_collision: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.per_step = np.clip(np.asarray(self.per_step, dtype=float).reshape(len(self.steps), -1), 0.0, 1.0)

    @property
    def total_raw(self):
        # fixed (t, i) summation order
        return float(sum(float(v) for v in self.per_step.ravel()))

    @property
    def total_clamped(self):
        return min(1.0, self.total_raw)

    def to_dict(self):
        return {
            "variant": self.variant,
            "steps": [int(s) for s in self.steps],
            "per_step": self.per_step.tolist(),
            "total_raw": self.total_raw,
            "total_clamped": self.total_clamped,
            "any_collision": self.any_collision,
            "n_samples": int(self.n_samples),
            "n_queries": None if self.n_queries is None else int(self.n_queries),
            "meta": self.meta,
        }


def cloud_risks(cloud, obstacles, n_queries, seed, steps=None, step_offset=0):
    """Per-step collision probabilities for a pushed cloud (rows = steps)."""
    steps = range(1, cloud.n_steps + 1) if steps is None else steps
    out = np.zeros((len(steps), len(obstacles)))
    for row, k in enumerate(steps):
        out[row] = step_collision_probs(cloud.at(k), obstacles, n_queries, rng_for(seed, step_offset + k))
    return out


def reference_segments(ref, seg_len):
    """``(start_step, segment_reference_like)`` pairs for a plain or piecewise reference."""
    if hasattr(ref, "segments"):
        return [(j * ref.seg_len, seg) for j, seg in enumerate(ref.segments)]
    out = []
    for start in range(0, ref.n_steps, seg_len):
        L = min(seg_len, ref.n_steps - start)
        states = None if ref.states is None else ref.states[start : start + L + 1]
        out.append((start, _Slice(ref.model, ref.controls[start : start + L], states)))
    return out


@dataclass
class _Slice:
    model: object
    controls: np.ndarray
    states: np.ndarray

    @property
    def n_steps(self):
        return len(self.controls)


def total_risk(predictor, ref, seg_len, joint_dist, obstacles, n_samples=1000, n_queries=2000, seed=0,
               mode="recenter"):
    """Total collision risk of a segmented reference (sum over steps and obstacles).

    ``mode="recenter"`` restarts each segment from the entry distribution;
    ``mode="push"`` carries the pushed cloud from one segment into the next.
    """
    if mode not in ("recenter", "push"):
        raise ValueError(f"unknown mode {mode!r}")
    n_err = ref.model.state_dim
    rows, steps = [], []
    pts = logr = None
    for j, (start, seg) in enumerate(reference_segments(ref, seg_len)):
        L = seg.n_steps
        if mode == "recenter" or j == 0:
            pts, logr = sample_initial(joint_dist, n_samples, rng_for(seed, j))
        elif seg.states is not None and not np.array_equal(prev_end, seg.states[0]):
            # piecewise reference restarted at a new anchor: re-express the errors
            pts = pts.copy()
            pts[:, :n_err] = tracking_error(state_from_error(pts[:, :n_err], prev_end), seg.states[0])
        cloud = push_forward(predictor, pts, logr, n_err, seg.controls[0], L, seg.states)
        try:
            rows.append(cloud_risks(cloud, obstacles, n_queries, seed, step_offset=start))
        except EmptySupport as exc:
            raise EmptySupport(f"segment {j} (steps {start + 1}..{start + L}): {exc}") from exc
        steps.extend(range(start + 1, start + L + 1))
        end = cloud.at(L)
        pts, logr = end.points, end.log_density
        prev_end = None if seg.states is None else seg.states[-1]
    per = np.vstack(rows) if rows else np.zeros((0, len(obstacles)))
    return RiskReport(steps, per, "density", n_samples, n_queries, meta={"mode": mode})


# ------------------------------------------------------------------ heatmap


def pushed_sample(predictor, ref, seg_len, joint_dist, step, n_samples=1000, seed=0):
    """Density sample at global ``step``, carried across segments of ``ref``."""
    if not 0 <= step <= ref.n_steps:
        raise ValueError(f"step {step} outside 0..{ref.n_steps}")
    pts, logr = sample_initial(joint_dist, n_samples, rng_for(seed, 0))
    n_err = ref.model.state_dim
    prev_end = None
    for start, seg in reference_segments(ref, seg_len):
        if prev_end is not None and not np.array_equal(prev_end, seg.states[0]):
            pts = pts.copy()
            pts[:, :n_err] = tracking_error(state_from_error(pts[:, :n_err], prev_end), seg.states[0])
        k = min(step - start, seg.n_steps)
        cloud = push_forward(predictor, pts, logr, n_err, seg.controls[0], k, seg.states[: k + 1])
        out = cloud.at(k)
        if step - start <= seg.n_steps:
            return DensitySample(out.points, out.log_density, n_err, out.ref_state, step)
        pts, logr, prev_end = out.points, out.log_density, seg.states[-1]
    raise AssertionError("unreachable")



@dataclass
class Heatmap:
    origin: np.ndarray
    cell: float
    nx: int
    ny: int
    mass: np.ndarray  # (ny, nx), row-major with y as the row index
    step: int = 0

    @property
    def total(self):
        return float(self.mass.sum())


def heatmap(sample, grid=None, n_queries=10000, seed=0, frame="world", radius=None, cells=40):
    """Probability mass per XY cell from one shared query set.

    ``grid`` is ``(origin_x, origin_y, cell, nx, ny)``; by default a square
    grid of ``cells`` cells per side covering every query is used.
    """
    approx = SupportApprox(sample.points, radius=radius)
    rng = seed if isinstance(seed, np.random.Generator) else rng_for(seed)
    queries, idx = approx.draw_queries(rng, n_queries)
    w = _query_weights(sample.log_density, idx)
    e = queries[:, : sample.n_err]
    xy = (sample.world(e) if frame == "world" else e)[:, :2]
    if grid is None:
        lo, hi = xy.min(axis=0), xy.max(axis=0)
        cell = float(max(hi - lo)) / cells * (1 + 1e-9) or 1e-9
        grid = (lo[0], lo[1], cell, cells, cells)
    ox, oy, cell, nx, ny = grid
    ix = np.floor((xy[:, 0] - ox) / cell).astype(int)
    iy = np.floor((xy[:, 1] - oy) / cell).astype(int)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    mass = np.zeros((int(ny), int(nx)))
    np.add.at(mass, (iy[ok], ix[ok]), w[ok])
    mass /= w.sum()
    return Heatmap(np.array([ox, oy], dtype=float), float(cell), int(nx), int(ny), mass, sample.step)


def reach_hull(sample, pos_dim):
    """Convex hull of the projected world positions of the pushed samples."""
    return ProjectedHull(sample.world()[:, :pos_dim])


# -------------------------------------------------------------- Monte Carlo


def _rollout_hits(loop, ref, e0, d, obstacles, substeps):
    q0 = state_from_error(e0, ref.states[0])
    sim = simulate_rollout(loop, q0, ref, d, substeps=substeps)
    pos = sim.states[1:]
    hits = np.zeros(pos.shape[:2] + (len(obstacles),), dtype=bool)
    for i, ob in enumerate(obstacles):
        hits[..., i] = ob.contains(pos)
    return hits  # (T, n, M)


def mc_collision_prob(loop, ref, error_dist, dist_dist, obstacles, n_mc, seed=0, substeps=2,
                      chunk=10000, importance=False):
    """Collision frequencies from closed-loop rollouts.

    With ``importance=True`` initial conditions are drawn uniformly over the
    support and reweighted by ``density * support volume``, an unbiased and
    much lower-variance estimate for rare collisions.
    """
    if n_mc < 1:
        raise ValueError("need at least one rollout")
    T = ref.n_steps
    acc = np.zeros((T, len(obstacles)))
    any_acc = 0.0
    for c, start in enumerate(range(0, n_mc, chunk)):
        m = min(chunk, n_mc - start)
        rng = rng_for(seed, c)
        if importance:
            e0 = error_dist.sample_uniform(rng, m)
            d = dist_dist.sample_uniform(rng, m)
            w = np.exp(error_dist.log_density(e0) + dist_dist.log_density(d))
            w *= error_dist.support_volume * dist_dist.support_volume
        else:
            e0 = error_dist.sample(rng, m)
            d = dist_dist.sample(rng, m)
            w = np.ones(m)
        if not obstacles:
            continue
        hits = _rollout_hits(loop, ref, e0, d, obstacles, substeps)
        acc += np.einsum("tnm,n->tm", hits, w)
        any_acc += float(w[hits.any(axis=(0, 2))].sum())
    variant = "importance" if importance else "monte-carlo"
    return RiskReport(list(range(1, T + 1)), acc / n_mc, variant, n_mc, None, any_acc / n_mc)
