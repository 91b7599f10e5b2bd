"""Joint integration of closed-loop error states and their log-density.

Along a trajectory of ``e' = f(e)`` the density obeys
``d(log rho)/dt = -div f(e)``, so pushing a point forward also tells us how
much the surrounding probability mass has been compressed.  We integrate
``log rho`` rather than ``rho`` so sharply contracting flows do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import DEFAULT_FD_STEP, VehicleModel, tracking_error, wrap_angle
from .errors import NonFiniteState

DEFAULT_SUBSTEPS = 10


@dataclass
class TrajectorySample:
    """Batch of trajectories on a uniform time grid.

    Arrays carry time on axis 0 and the batch on axis 1: ``errors`` is
    ``(T+1, n, d)``, ``log_densities`` is ``(T+1, n)``.  ``states`` holds the
    world-frame states when a reference was available.
    """

    times: np.ndarray
    errors: np.ndarray
    log_densities: np.ndarray | None = None
    states: np.ndarray | None = None

    def __post_init__(self):
        if self.times.size > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")
        if self.errors.shape[0] != self.times.size:
            raise ValueError("errors and times disagree in length")

    @property
    def densities(self):
        return None if self.log_densities is None else np.exp(self.log_densities)


def _wrap(e, idx):
    if idx is not None:
        e = e.copy()
        e[..., idx] = wrap_angle(e[..., idx])
    return e


def integrate_field(rhs, e0, log_rho0, n_steps, dt, substeps=DEFAULT_SUBSTEPS, wrap_index=None, check_finite=True):
    """RK4 on the augmented system ``[e, log rho]``.

    ``rhs(e, k)`` returns ``(f(e), div f(e))`` during output step ``k``.
    Returns arrays of shape ``(n_steps+1, n, d)`` and ``(n_steps+1, n)``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    e = np.atleast_2d(np.asarray(e0, dtype=float)).copy()
    logr = np.broadcast_to(np.asarray(log_rho0, dtype=float), e.shape[:1]).copy()
    errs = np.empty((n_steps + 1,) + e.shape)
    logs = np.empty((n_steps + 1,) + logr.shape)
    errs[0], logs[0] = e, logr
    h = dt / substeps
    for k in range(n_steps):
        for _ in range(substeps):
            f1, d1 = rhs(e, k)
            f2, d2 = rhs(e + 0.5 * h * f1, k)
            f3, d3 = rhs(e + 0.5 * h * f2, k)
            f4, d4 = rhs(e + h * f3, k)
            e = e + (h / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)
            logr = logr - (h / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
            e = _wrap(e, wrap_index)
        if check_finite and not (np.all(np.isfinite(e)) and np.all(np.isfinite(logr))):
            raise NonFiniteState(f"state diverged at step {k + 1}")
        errs[k + 1], logs[k + 1] = e, logr
    return errs, logs


def _step_input(a, k):
    return None if a is None else a[k]


def integrate_augmented(system, e0, log_rho0, u_ref, dist, n_steps, dt, substeps=DEFAULT_SUBSTEPS,
                        h=DEFAULT_FD_STEP, check_finite=True):
    """Push error states and log-densities through ``system`` for ``n_steps``.

    ``u_ref`` has a leading step axis, ``(n_steps, m)`` or ``(n_steps, n, m)``;
    it may be ``None`` for systems without reference inputs.  ``dist`` is
    constant over the rollout.
    """
    if u_ref is not None:
        u_ref = np.asarray(u_ref, dtype=float)
        if u_ref.shape[0] < n_steps:
            raise ValueError("u_ref shorter than the requested horizon")

    def rhs(e, k):
        return system.field_and_divergence(e, _step_input(u_ref, k), dist, h)

    errs, logs = integrate_field(rhs, e0, log_rho0, n_steps, dt, substeps, system.heading_index, check_finite)
    return TrajectorySample(dt * np.arange(n_steps + 1), errs, logs)


def flow_map(system, e0, u_ref, dist, n_steps, dt, substeps=DEFAULT_SUBSTEPS):
    """Error state reached after ``n_steps`` (no density bookkeeping needed by callers)."""
    return integrate_augmented(system, e0, 0.0, u_ref, dist, n_steps, dt, substeps).errors[-1]


def _rk4(f, y, h):
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(eq=False)
class Reference:
    """Open-loop reference driven by per-step controls from ``q0``.

    States are integrated with RK4 so the reference is (to integrator accuracy)
    an exact solution of the vehicle ODE; the error system then has the
    reference as an equilibrium.
    """

    model: VehicleModel
    q0: np.ndarray
    controls: np.ndarray
    dt: float
    substeps: int = DEFAULT_SUBSTEPS

    def __post_init__(self):
        self.q0 = np.asarray(self.q0, dtype=float)
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        states = np.empty((self.n_steps + 1, self.model.state_dim))
        q = states[0] = self.q0
        h = self.dt / self.substeps
        for k, u in enumerate(self.controls):
            for _ in range(self.substeps):
                q = _rk4(lambda y: self.model.dynamics(y, u), q, h)
                q[-1] = wrap_angle(q[-1])
            states[k + 1] = q
        self.states = states

    @classmethod
    def from_segments(cls, model, q0, seg_controls, seg_len, dt, substeps=DEFAULT_SUBSTEPS):
        controls = np.repeat(np.atleast_2d(seg_controls), seg_len, axis=0)
        return cls(model, q0, controls, dt, substeps)

    @property
    def n_steps(self):
        return self.controls.shape[0]

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)


@dataclass(eq=False)
class PiecewiseReference:
    """Segment-anchored reference: segment ``j`` starts exactly at ``anchors[j]``.

    Plans are defined by a forward Euler recurrence, which drifts from the
    exact ODE solution by a few centimetres over a long horizon.  Restarting
    the exact reference at every segment anchor keeps the executed reference
    within one segment's worth of that drift.  ``states[j*L]`` holds the
    anchor of segment ``j``; the final state is the end of the last segment.
    """

    model: VehicleModel
    anchors: np.ndarray
    seg_controls: np.ndarray
    seg_len: int
    dt: float
    substeps: int = DEFAULT_SUBSTEPS

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        self.seg_controls = np.atleast_2d(np.asarray(self.seg_controls, dtype=float))
        if len(self.anchors) != len(self.seg_controls):
            raise ValueError("one anchor per segment required")
        self.segments = [
            Reference(self.model, a, np.repeat(u[None], self.seg_len, 0), self.dt, self.substeps)
            for a, u in zip(self.anchors, self.seg_controls)
        ]
        self.controls = np.repeat(self.seg_controls, self.seg_len, axis=0)
        self.states = np.concatenate([r.states[:-1] for r in self.segments] + [self.segments[-1].states[-1:]])

    @property
    def q0(self):
        return self.anchors[0]

    @property
    def n_steps(self):
        return self.controls.shape[0]

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)


def _joint_rk4(loop, q, ref, dist, substeps, check_finite, step0):
    """Integrate robots ``q`` against one continuous reference; returns (states, refs) for steps 1..T."""
    model = loop.model
    qr = np.asarray(ref.q0, dtype=float)[None, :].copy()
    T = ref.n_steps
    states = np.empty((T,) + q.shape)
    refs = np.empty((T, model.state_dim))
    h = ref.dt / substeps
    hi = model.heading_index
    for k in range(T):
        u_ref = ref.controls[k]
        for _ in range(substeps):
            a1 = loop.world_field(q, qr, u_ref, dist)
            r1 = model.dynamics(qr, u_ref)
            q2, r2 = q + 0.5 * h * a1, qr + 0.5 * h * r1
            a2 = loop.world_field(q2, r2, u_ref, dist)
            r2d = model.dynamics(r2, u_ref)
            q3, r3 = q + 0.5 * h * a2, qr + 0.5 * h * r2d
            a3 = loop.world_field(q3, r3, u_ref, dist)
            r3d = model.dynamics(r3, u_ref)
            q4, r4 = q + h * a3, qr + h * r3d
            a4 = loop.world_field(q4, r4, u_ref, dist)
            r4d = model.dynamics(r4, u_ref)
            q = q + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
            qr = qr + (h / 6.0) * (r1 + 2.0 * r2d + 2.0 * r3d + r4d)
            q[:, hi] = wrap_angle(q[:, hi])
            qr[:, hi] = wrap_angle(qr[:, hi])
        if check_finite and not np.all(np.isfinite(q)):
            raise NonFiniteState(f"rollout diverged at step {step0 + k + 1}")
        states[k], refs[k] = q, qr[0]
    return states, refs


def simulate_rollout(loop, q0, ref, dist=None, substeps=None, check_finite=True):
    """Closed-loop world-frame simulation of a batch of robots tracking ``ref``.

    Robot and reference are integrated jointly with RK4 so both see the same
    stage times.  A :class:`PiecewiseReference` is followed segment by
    segment, the reference restarting at each anchor.  Returns a
    :class:`TrajectorySample` with ``states`` and ``errors`` filled (errors at
    a segment boundary are taken w.r.t. the finished segment's end point).
    """
    substeps = ref.substeps if substeps is None else substeps
    q = np.atleast_2d(np.asarray(q0, dtype=float)).copy()
    parts = getattr(ref, "segments", [ref])
    states, refs = [q[None]], [np.asarray(ref.q0, dtype=float)[None]]
    step = 0
    for part in parts:
        s, r = _joint_rk4(loop, q, part, dist, substeps, check_finite, step)
        states.append(s)
        refs.append(r)
        q = s[-1]
        step += part.n_steps
    states = np.concatenate(states)
    refs = np.concatenate(refs)
    errors = tracking_error(states, refs[:, None, :])
    return TrajectorySample(ref.times, errors, None, states)
