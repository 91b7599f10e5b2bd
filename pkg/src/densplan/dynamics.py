"""Vehicle models, Lyapunov tracking controllers and the closed-loop error field.

States, controls and errors are numpy arrays with components on the last axis,
so every function here works on single vectors and on ``(n, d)`` batches alike.

Layouts::

    car         q = (x, y, theta)        u = (v, omega)        e = (e_x, e_y, e_theta)
    hovercraft  q = (x, y, z, theta)     u = (v, v_z, omega)   e = (e_x, e_y, e_z, e_theta)

The tracking error is expressed in the robot body frame,
``e_xy = R(theta) (p_ref - p)`` and ``e_theta = theta_ref - theta``.  With that
sign the controller below is the classical Kanayama law and the reference is an
asymptotically stable equilibrium of the error system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_FD_STEP = 1e-4


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def car_dynamics(q, u):
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    th = q[..., 2]
    v, w = u[..., 0], u[..., 1]
    return np.stack(np.broadcast_arrays(v * np.cos(th), v * np.sin(th), w), axis=-1)


def hovercraft_dynamics(q, u):
    q = np.asarray(q, dtype=float)
    u = np.asarray(u, dtype=float)
    th = q[..., 3]
    v, vz, w = u[..., 0], u[..., 1], u[..., 2]
    return np.stack(
        np.broadcast_arrays(v * np.cos(th), v * np.sin(th), vz, w), axis=-1
    )


def tracking_error(q, q_ref):
    """Body-frame tracking error of ``q`` w.r.t. ``q_ref`` (car or hovercraft)."""
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    th = q[..., -1]
    c, s = np.cos(th), np.sin(th)
    dx = q_ref[..., 0] - q[..., 0]
    dy = q_ref[..., 1] - q[..., 1]
    parts = [c * dx + s * dy, -s * dx + c * dy]
    if q.shape[-1] == 4:
        parts.append(q_ref[..., 2] - q[..., 2])
    parts.append(wrap_angle(q_ref[..., -1] - th))
    return np.stack(np.broadcast_arrays(*parts), axis=-1)


def state_from_error(e, q_ref):
    """Inverse of :func:`tracking_error` for a given reference state."""
    e = np.asarray(e, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    th = wrap_angle(q_ref[..., -1] - e[..., -1])
    c, s = np.cos(th), np.sin(th)
    ex, ey = e[..., 0], e[..., 1]
    parts = [q_ref[..., 0] - (c * ex - s * ey), q_ref[..., 1] - (s * ex + c * ey)]
    if e.shape[-1] == 4:
        parts.append(q_ref[..., 2] - e[..., 2])
    parts.append(th)
    return np.stack(np.broadcast_arrays(*parts), axis=-1)


@dataclass(frozen=True)
class ControllerGains:
    k1: float = 1.0
    k2: float = 1.0
    k3: float = 1.0
    k4: float = 1.0

    def __post_init__(self):
        for name in ("k1", "k2", "k3", "k4"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gain {name} must be strictly positive")


def tracking_controller(e, u_ref, gains, dist=None, u_min=None, u_max=None):
    """Lyapunov tracking law; disturbances are added before clamping."""
    e = np.asarray(e, dtype=float)
    u_ref = np.asarray(u_ref, dtype=float)
    vr, wr = u_ref[..., 0], u_ref[..., -1]
    ex, ey, eth = e[..., 0], e[..., 1], e[..., -1]
    v = vr * np.cos(eth) + gains.k1 * ex
    w = wr + vr * (gains.k2 * ey + gains.k3 * np.sin(eth))
    if e.shape[-1] == 4:
        vz = u_ref[..., 1] + gains.k4 * e[..., 2]
        u = np.stack(np.broadcast_arrays(v, vz, w), axis=-1)
    else:
        u = np.stack(np.broadcast_arrays(v, w), axis=-1)
    if dist is not None:
        u = u + np.asarray(dist, dtype=float)
    if u_min is not None or u_max is not None:
        u = np.clip(u, u_min, u_max)
    return u


def error_dynamics(e, u, u_ref):
    """Time derivative of the body-frame error given applied and reference controls."""
    ex, ey, eth = e[..., 0], e[..., 1], e[..., -1]
    v, w = u[..., 0], u[..., -1]
    vr, wr = u_ref[..., 0], u_ref[..., -1]
    dex = w * ey - v + vr * np.cos(eth)
    dey = -w * ex + vr * np.sin(eth)
    deth = wr - w
    if e.shape[-1] == 4:
        dez = u_ref[..., 1] - u[..., 1]
        return np.stack(np.broadcast_arrays(dex, dey, dez, deth), axis=-1)
    return np.stack(np.broadcast_arrays(dex, dey, deth), axis=-1)


def divergence(field, e, h=DEFAULT_FD_STEP):
    """Central finite-difference divergence of ``field`` at the rows of ``e``."""
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    e = np.asarray(e, dtype=float)
    out = np.zeros(e.shape[:-1])
    for i in range(e.shape[-1]):
        step = np.zeros(e.shape[-1])
        step[i] = h
        out = out + (field(e + step)[..., i] - field(e - step)[..., i]) / (2.0 * h)
    return out


@dataclass(frozen=True)
class VehicleModel:
    name: str
    state_dim: int
    control_dim: int
    pos_dim: int

    def dynamics(self, q, u):
        return car_dynamics(q, u) if self.name == "car" else hovercraft_dynamics(q, u)

    @property
    def heading_index(self):
        return self.state_dim - 1


CAR = VehicleModel("car", 3, 2, 2)
HOVERCRAFT = VehicleModel("hovercraft", 4, 3, 3)
MODELS = {"car": CAR, "hovercraft": HOVERCRAFT}

DEFAULT_BOUNDS = {
    "car": (np.array([-4.0, -2.0]), np.array([4.0, 2.0])),
    "hovercraft": (np.array([-4.0, -2.0, -2.0]), np.array([4.0, 2.0, 2.0])),
}


@dataclass(frozen=True, eq=False)
class ClosedLoop:
    """A vehicle under the tracking controller, viewed in error coordinates.

    This is the system object consumed by the Liouville integrator and the
    predictors: it exposes ``error_field(e, u_ref, dist)`` and its divergence.
    """

    model: VehicleModel
    gains: ControllerGains = ControllerGains()
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None

    @property
    def n_err(self):
        return self.model.state_dim

    @property
    def n_dist(self):
        return self.model.control_dim

    @property
    def n_uref(self):
        return self.model.control_dim

    @property
    def heading_index(self):
        return self.model.heading_index

    def control(self, e, u_ref, dist=None):
        return tracking_controller(e, u_ref, self.gains, dist, self.u_min, self.u_max)

    def error_field(self, e, u_ref, dist=None):
        e = np.asarray(e, dtype=float)
        u_ref = np.asarray(u_ref, dtype=float)
        return error_dynamics(e, self.control(e, u_ref, dist), u_ref)

    def world_field(self, q, q_ref, u_ref, dist=None):
        u = self.control(tracking_error(q, q_ref), u_ref, dist)
        return self.model.dynamics(q, u)

    def field_and_divergence(self, e, u_ref, dist=None, h=DEFAULT_FD_STEP):
        """Evaluate the field and its FD divergence in one batched call."""
        return batched_field_and_divergence(self.error_field, e, u_ref, dist, h)


def batched_field_and_divergence(field, e, u_ref, dist, h=DEFAULT_FD_STEP):
    # stack e, e +/- h*basis so the field is called once on (2d+1)*n rows
    e = np.atleast_2d(np.asarray(e, dtype=float))
    n, d = e.shape
    offsets = np.concatenate([np.zeros((1, d)), h * np.eye(d), -h * np.eye(d)])
    big = (e[None, :, :] + offsets[:, None, :]).reshape(-1, d)
    reps = 2 * d + 1

    def tile(a):
        if a is None:
            return None
        a = np.asarray(a, dtype=float)
        if a.ndim < 2:
            return a
        return np.broadcast_to(a, (n, a.shape[-1]))[None].repeat(reps, 0).reshape(-1, a.shape[-1])

    out = field(big, tile(u_ref), tile(dist)).reshape(reps, n, d)
    idx = np.arange(d)
    div = ((out[1 + idx, :, idx] - out[1 + d + idx, :, idx]) / (2.0 * h)).sum(axis=0)
    return out[0], div


def car_divergence_symbolic(e, u_ref, gains):
    """Hand-derived divergence of the unclamped car error field."""
    e = np.asarray(e, dtype=float)
    vr = np.asarray(u_ref, dtype=float)[..., 0]
    return -gains.k1 - vr * gains.k2 * e[..., 0] - vr * gains.k3 * np.cos(e[..., 2])


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """``e' = A e + dist``; a closed-form test bed for the density machinery."""

    A: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))

    @property
    def n_err(self):
        return self.A.shape[0]

    @property
    def n_dist(self):
        return self.A.shape[0]

    n_uref = 0
    heading_index = None

    def error_field(self, e, u_ref=None, dist=None):
        out = np.asarray(e, dtype=float) @ self.A.T
        if dist is not None:
            out = out + dist
        return out

    def field_and_divergence(self, e, u_ref=None, dist=None, h=DEFAULT_FD_STEP):
        return batched_field_and_divergence(self.error_field, e, u_ref, dist, h)
