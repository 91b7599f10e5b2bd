"""Planning scenarios: endpoints, obstacles, timing, bounds and uncertainty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import InitialDistribution, JointDistribution
from .dynamics import DEFAULT_BOUNDS, MODELS, ClosedLoop, ControllerGains
from .probest import Obstacle


@dataclass(frozen=True, eq=False)
class Scenario:
    model: str
    q_origin: np.ndarray
    q_dest: np.ndarray
    obstacles: tuple = ()
    horizon_steps: int = 50
    n_segments: int = 5
    dt: float = 0.02
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    gains: ControllerGains = ControllerGains()
    init_error: InitialDistribution | None = None
    disturbance: InitialDistribution | None = None
    gamma: float = 1e-4
    workspace: tuple | None = None
    name: str = field(default="scenario", compare=False)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        vm = MODELS[self.model]
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("q_origin", np.asarray(self.q_origin, dtype=float))
        set_("q_dest", np.asarray(self.q_dest, dtype=float))
        if self.q_origin.shape != (vm.state_dim,) or self.q_dest.shape != (vm.state_dim,):
            raise ValueError("origin/destination dimension does not match the model")
        set_("obstacles", tuple(self.obstacles))
        for ob in self.obstacles:
            if len(ob.center) != vm.pos_dim:
                raise ValueError("obstacle dimension does not match the model")
        if self.n_segments < 1 or self.horizon_steps < 1:
            raise ValueError("need at least one segment and one step")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.gamma > 0:
            raise ValueError("risk threshold must be positive")
        # pad the last segment so T = N * L
        set_("horizon_steps", self.n_segments * math.ceil(self.horizon_steps / self.n_segments))
        lo, hi = DEFAULT_BOUNDS[self.model]
        set_("u_min", lo.copy() if self.u_min is None else np.asarray(self.u_min, dtype=float))
        set_("u_max", hi.copy() if self.u_max is None else np.asarray(self.u_max, dtype=float))
        if np.any(self.u_max < self.u_min):
            raise ValueError("u_max below u_min")
        if self.init_error is None:
            set_("init_error", InitialDistribution.point(np.zeros(vm.state_dim)))
        if self.disturbance is None:
            set_("disturbance", InitialDistribution.point(np.zeros(vm.control_dim)))
        if self.init_error.dim != vm.state_dim or self.disturbance.dim != vm.control_dim:
            raise ValueError("uncertainty dimensions do not match the model")
        if self.workspace is not None:
            wlo, whi = (np.asarray(w, dtype=float) for w in self.workspace)
            set_("workspace", (wlo, whi))
            p = vm.pos_dim
            for q in (self.q_origin, self.q_dest):
                if np.any(q[:p] < wlo) or np.any(q[:p] > whi):
                    raise ValueError("origin/destination outside the workspace")

    @property
    def vehicle(self):
        return MODELS[self.model]

    @property
    def seg_len(self):
        return self.horizon_steps // self.n_segments

    @property
    def loop(self):
        return ClosedLoop(self.vehicle, self.gains, self.u_min, self.u_max)

    @property
    def joint_dist(self):
        return JointDistribution((self.init_error, self.disturbance))

    def remainder(self, anchor, first_segment):
        """Sub-problem covering segments ``first_segment..N-1`` from ``anchor``."""
        n = self.n_segments - first_segment
        return replace(self, q_origin=np.asarray(anchor, dtype=float), n_segments=n,
                       horizon_steps=n * self.seg_len)

    def with_obstacles(self, obstacles):
        return replace(self, obstacles=tuple(obstacles))


def car_template(width=4.0, **kw):
    """Desk-scale car scenario: left-to-right across a 10 x 10 workspace.

    ``width`` is the truncation half-width of the Gaussian uncertainties in
    standard deviations.
    """
    base = dict(
        model="car",
        q_origin=[1.0, 5.0, 0.0],
        q_dest=[9.0, 5.0, 0.0],
        horizon_steps=200,
        n_segments=5,
        dt=0.02,
        init_error=InitialDistribution.gaussian([0, 0, 0], [0.02, 0.02, 0.02], width=width),
        disturbance=InitialDistribution.gaussian([0, 0], [0.02, 0.02], width=width),
        workspace=([0.0, 0.0], [10.0, 10.0]),
        name="car",
    )
    base.update(kw)
    return Scenario(**base)


def hovercraft_template(width=4.0, **kw):
    base = dict(
        model="hovercraft",
        q_origin=[1.0, 5.0, 5.0, 0.0],
        q_dest=[9.0, 5.0, 5.0, 0.0],
        horizon_steps=200,
        n_segments=5,
        dt=0.02,
        init_error=InitialDistribution.gaussian([0, 0, 0, 0], [0.02, 0.02, 0.02, 0.02], width=width),
        disturbance=InitialDistribution.gaussian([0, 0, 0], [0.02, 0.02, 0.02], width=width),
        workspace=([0.0, 0.0, 0.0], [10.0, 10.0, 10.0]),
        name="hovercraft",
    )
    base.update(kw)
    return Scenario(**base)


def rare_event_scenario(offset=0.605):
    """Straight 1 s drive past an obstacle whose collision risk is ~5e-5.

    The obstacle offset was calibrated with importance-weighted rollouts
    (``scripts/calibrate_rare_event.py``).
    """
    return Scenario(
        model="car",
        q_origin=[0.0, 0.0, 0.0],
        q_dest=[2.0, 0.0, 0.0],
        obstacles=(Obstacle((1.5, offset), 0.3),),
        horizon_steps=50,
        n_segments=1,
        dt=0.02,
        init_error=InitialDistribution.gaussian([0, 0, 0], [0.1, 0.1, 0.1], width=4.0),
        disturbance=InitialDistribution.gaussian([0, 0], [0.1, 0.1], width=4.0),
        name="rare-event",
    )
