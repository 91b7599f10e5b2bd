"""Reference generation: single-shooting penalty NLP over piecewise-constant controls.

The decision variables are one control vector per segment.  States are never
free variables; they come from the forward Euler recurrence
``q[k+1] = q[k] + f(q[k], u) * dt``, so every returned plan satisfies the
dynamics bit-exactly.  The objective is the squared obstacle slack plus an
escalating terminal penalty::

    J = sum_{i,k} max(0, r_i'^2 - |p_k - c_i|^2)^2
        + mu * (|p_T - p_dest|^2 + (0.1 * wrap(theta_T - theta_dest))^2)

with ``r_i' = r_i + margin``.  Gradients come from a hand-written adjoint of
the Euler rollout, vectorised with reversed cumulative sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .dynamics import wrap_angle
from .errors import Infeasible

log = logging.getLogger(__name__)

TOL_END = 0.1
TOL_OBS = 1e-3
DEFAULT_MARGIN = 0.01
MU_SCHEDULE = (1e1, 1e2, 1e3, 1e4, 1e5)
HEADING_SCALE = 0.1   # heading error is scaled by this before squaring
OBSTACLE_ESCALATION = 4
RESTARTS = (0.0, 1.0, -1.0, 2.0, -2.0, 0.5, -0.5, 3.0, -3.0)


@dataclass
class SegmentedPlan:
    """Per-segment controls and the Euler states they generate."""

    controls: np.ndarray   # (N, m)
    states: np.ndarray     # (T+1, d)
    seg_len: int
    dt: float

    @property
    def n_segments(self):
        return self.controls.shape[0]

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def step_controls(self):
        return np.repeat(self.controls, self.seg_len, axis=0)

    def segment_bounds(self, j):
        """Step range ``[jL, (j+1)L)`` covered by segment ``j``."""
        if not 0 <= j < self.n_segments:
            raise IndexError(j)
        return j * self.seg_len, (j + 1) * self.seg_len

    def segment(self, j):
        """States ``q_{jL} .. q_{(j+1)L}`` (both endpoints included)."""
        a, b = self.segment_bounds(j)
        return self.states[a : b + 1]

    def to_dict(self):
        return {
            "controls": self.controls.tolist(),
            "seg_len": int(self.seg_len),
            "dt": float(self.dt),
            "n_steps": int(self.n_steps),
        }


@dataclass
class SolveReport:
    terminal_error: float
    max_penetration: float
    objective: float
    round_terminal_errors: list = field(default_factory=list)
    iterations: int = 0
    restarts: int = 0

    @property
    def feasible(self):
        return self.terminal_error <= TOL_END and self.max_penetration <= TOL_OBS


def _rollout_arrays(model_name, q0, U, dt):
    # q0 (d,), U (T, m) -> states (T+1, d); cumsum is a sequential recurrence
    th = np.concatenate([[q0[-1]], U[:, -1] * dt]).cumsum()
    v = U[:, 0]
    cols = [
        np.concatenate([[q0[0]], v * np.cos(th[:-1]) * dt]).cumsum(),
        np.concatenate([[q0[1]], v * np.sin(th[:-1]) * dt]).cumsum(),
    ]
    if model_name == "hovercraft":
        cols.append(np.concatenate([[q0[2]], U[:, 1] * dt]).cumsum())
    cols.append(th)
    return np.stack(cols, axis=1)


def euler_rollout(model, q0, step_controls, dt):
    """Forward Euler states for per-step controls (no heading wrap)."""
    q0 = np.asarray(q0, dtype=float)
    U = np.atleast_2d(np.asarray(step_controls, dtype=float))
    if len(U) == 0:
        return q0[None, :].copy()
    return _rollout_arrays(model.name, q0, U, dt)


def rollout(controls, scenario):
    """Euler rollout of per-segment ``controls`` for ``scenario``."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    if controls.shape != (scenario.n_segments, scenario.vehicle.control_dim):
        raise ValueError(f"expected controls of shape {(scenario.n_segments, scenario.vehicle.control_dim)}")
    U = np.repeat(controls, scenario.seg_len, axis=0)
    states = euler_rollout(scenario.vehicle, scenario.q_origin, U, scenario.dt)
    return SegmentedPlan(controls.copy(), states, scenario.seg_len, scenario.dt)


def min_clearance(states, obstacles, pos_dim):
    """Smallest ``|p - c| - r`` over states and obstacles (inf with none)."""
    if not obstacles:
        return np.inf
    p = np.asarray(states)[:, :pos_dim]
    return min(float(np.min(np.linalg.norm(p - np.asarray(ob.center), axis=1)) - ob.radius) for ob in obstacles)


def terminal_error(states, q_dest, pos_dim):
    return float(np.linalg.norm(states[-1, :pos_dim] - q_dest[:pos_dim]))


class _Problem:
    """Objective and adjoint gradient for one scenario."""

    def __init__(self, scenario, margin):
        self.sc = scenario
        self.p = scenario.vehicle.pos_dim
        self.centers = np.array([ob.center for ob in scenario.obstacles]).reshape(-1, self.p)
        self.r2 = np.array([(ob.radius + margin) ** 2 for ob in scenario.obstacles])
        self.mu = 1.0
        self.w_obs = 1.0

    def __call__(self, x):
        sc, p, dt, L = self.sc, self.p, self.sc.dt, self.sc.seg_len
        C = x.reshape(sc.n_segments, -1)
        U = np.repeat(C, L, axis=0)
        Q = _rollout_arrays(sc.model, sc.q_origin, U, dt)
        P = Q[:, :p]
        th = Q[:, -1]
        gQ = np.zeros_like(Q)

        J = 0.0
        if len(self.r2):
            diff = P[:, None, :] - self.centers[None, :, :]          # (T+1, M, p)
            s = np.maximum(0.0, self.r2[None, :] - np.sum(diff**2, axis=2))
            J += self.w_obs * float(np.sum(s**2))
            gQ[:, :p] += np.einsum("km,kmp->kp", -4.0 * self.w_obs * s, diff)

        dpos = P[-1] - sc.q_dest[:p]
        dth = float(wrap_angle(th[-1] - sc.q_dest[-1]))
        J += self.mu * (float(dpos @ dpos) + (HEADING_SCALE * dth) ** 2)
        gQ[-1, :p] += 2.0 * self.mu * dpos
        gQ[-1, -1] += 2.0 * self.mu * HEADING_SCALE**2 * dth

        # adjoint: increment i feeds every state k > i
        G = np.cumsum(gQ[:0:-1], axis=0)[::-1]                       # (T, d), G[i] = sum_{k>i} gQ[k]
        c, s_ = np.cos(th[:-1]), np.sin(th[:-1])
        v = U[:, 0]
        gU = np.zeros_like(U)
        gU[:, 0] = dt * (c * G[:, 0] + s_ * G[:, 1])
        if sc.model == "hovercraft":
            gU[:, 1] = dt * G[:, 2]
        # total sensitivity of J to theta_k, k = 0..T
        gth = gQ[:, -1].copy()
        gth[:-1] += dt * v * (-s_ * G[:, 0] + c * G[:, 1])
        gU[:, -1] = dt * np.cumsum(gth[:0:-1])[::-1]
        grad = gU.reshape(sc.n_segments, L, -1).sum(axis=1).ravel()
        return J, grad


def initial_guess(scenario, seed=0, turn=0.0):
    """Straight-line heuristic with a small seeded perturbation.

    ``turn`` adds a left/right heading offset over the first half of the
    horizon (undone in the second half) to seed detours around obstacles.
    """
    sc = scenario
    N, p = sc.n_segments, sc.vehicle.pos_dim
    horizon = sc.horizon_steps * sc.dt
    delta = sc.q_dest[:p] - sc.q_origin[:p]
    heading = np.arctan2(delta[1], delta[0]) if np.linalg.norm(delta[:2]) > 1e-9 else sc.q_origin[-1]
    C = np.zeros((N, sc.vehicle.control_dim))
    C[:, 0] = np.linalg.norm(delta[:2]) / horizon
    if sc.model == "hovercraft":
        C[:, 1] = delta[2] / horizon
    # turn toward the goal in the first segment, back to the final heading in the last
    seg_t = sc.seg_len * sc.dt
    C[0, -1] += float(wrap_angle(heading - sc.q_origin[-1])) / seg_t
    C[-1, -1] += float(wrap_angle(sc.q_dest[-1] - heading)) / seg_t
    if turn and N >= 2:
        h = N // 2
        C[0, -1] += turn
        C[h, -1] -= turn
        if h + 1 < N:
            C[h, -1] -= turn
            C[-1, -1] += turn
        C[:, 0] *= 1.3
    rng = np.random.default_rng([int(seed), 7])
    C += 1e-3 * rng.standard_normal(C.shape)
    return np.clip(C, sc.u_min, sc.u_max)


def _optimise(prob, x0, bounds, iters, feasible):
    rounds = []
    total_it = 0
    x = x0
    prob.w_obs = 1.0

    def run(x):
        res = minimize(prob, x, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": iters, "ftol": 1e-15, "gtol": 1e-10})
        return res.x, int(res.nit)

    for mu in MU_SCHEDULE:
        prob.mu = mu
        x, it = run(x)
        total_it += it
        rounds.append(x.copy())
    # the goal penalty can end up outweighing a shallow penetration; trade some
    # of the (softened) goal accuracy for clearance while it stays in tolerance
    for _ in range(OBSTACLE_ESCALATION):
        term, pen = feasible(x)
        if pen <= TOL_OBS or term > TOL_END:
            break
        prob.w_obs *= 100.0
        x_new, it = run(x)
        total_it += it
        if feasible(x_new)[0] > TOL_END:
            break
        x = x_new
    return x, rounds, total_it


def solve_nlp(scenario, warm_start=None, seed=0, margin=DEFAULT_MARGIN, max_iter=2000, restarts=RESTARTS,
              raise_on_infeasible=True):
    """Solve the penalty NLP; returns ``(plan, report)``.

    Restarts cycle through detour seeds until one is feasible.  Raises
    :class:`Infeasible` (carrying the best plan) otherwise.
    """
    sc = scenario
    if warm_start is not None:
        ws = np.atleast_2d(np.asarray(getattr(warm_start, "controls", warm_start), dtype=float))
        if ws.shape != (sc.n_segments, sc.vehicle.control_dim):
            raise ValueError("warm start does not match the scenario")
        starts = [np.clip(ws, sc.u_min, sc.u_max)] + [initial_guess(sc, seed, t) for t in restarts]
    else:
        starts = [initial_guess(sc, seed, t) for t in restarts]
    prob = _Problem(sc, margin)
    bounds = list(zip(np.tile(sc.u_min, sc.n_segments), np.tile(sc.u_max, sc.n_segments)))
    p = sc.vehicle.pos_dim
    best = None
    def check(x):
        st = rollout(x.reshape(sc.n_segments, -1), sc).states
        return terminal_error(st, sc.q_dest, p), max(0.0, -min_clearance(st, sc.obstacles, p))

    for n_try, x0 in enumerate(starts):
        x, rounds, iters = _optimise(prob, x0.ravel(), bounds, max_iter, check)
        plan = rollout(x.reshape(sc.n_segments, -1), sc)
        round_errs = [terminal_error(rollout(r.reshape(sc.n_segments, -1), sc).states, sc.q_dest, p) for r in rounds]
        report = SolveReport(
            terminal_error=terminal_error(plan.states, sc.q_dest, p),
            max_penetration=max(0.0, -min_clearance(plan.states, sc.obstacles, p)),
            objective=float(prob(x)[0]),
            round_terminal_errors=round_errs,
            iterations=iters,
            restarts=n_try,
        )
        key = (not report.feasible, report.max_penetration + report.terminal_error)
        if best is None or key < best[0]:
            best = (key, plan, report)
        if report.feasible:
            break
    _, plan, report = best
    if not report.feasible and raise_on_infeasible:
        raise Infeasible(
            f"NLP infeasible: terminal error {report.terminal_error:.3g}, penetration {report.max_penetration:.3g}",
            plan=plan, report=report,
        )
    return plan, report
