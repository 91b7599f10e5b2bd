"""Neural surrogate of the flow map and log-density ratio.

The network sees ``(e0, dist, u_ref, t)`` and outputs a residual that is
gated by ``tau = t / horizon``::

    e_t = e0 + tau * (a_e * net_e(x) + b_e)
    g_t = tau * (a_g * net_g(x) + b_g)

so both the flow map and ``g = log(rho_t / rho_0)`` are exact at ``t = 0``.
Everything (forward, backward, optimiser) is plain numpy in float64.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .distributions import InitialDistribution
from .errors import DivergedTraining, HorizonExceeded
from .liouville import integrate_augmented

log = logging.getLogger(__name__)

MAGIC = b"DPMLP001"
FORMAT_VERSION = 1
HIDDEN = (128, 128, 128)
OUTPUT_GAIN = 0.1


# --------------------------------------------------------------------- data


@dataclass(frozen=True, eq=False)
class DataSpec:
    """What to simulate: a closed-loop system plus input distributions."""

    system: object
    init_dist: InitialDistribution
    dist_dist: InitialDistribution | None = None
    uref_lo: np.ndarray | None = None
    uref_hi: np.ndarray | None = None
    n_steps: int = 50
    dt: float = 0.02
    substeps: int = 2

    @classmethod
    def from_scenario(cls, scenario, n_steps=50, substeps=2, uref_lo=None, uref_hi=None):
        return cls(
            scenario.loop,
            scenario.init_error,
            scenario.disturbance,
            np.asarray(scenario.u_min if uref_lo is None else uref_lo, dtype=float),
            np.asarray(scenario.u_max if uref_hi is None else uref_hi, dtype=float),
            n_steps,
            scenario.dt,
            substeps,
        )

    @property
    def n_err(self):
        return self.init_dist.dim

    @property
    def n_dist(self):
        return 0 if self.dist_dist is None else self.dist_dist.dim

    @property
    def n_uref(self):
        return 0 if self.uref_lo is None else len(self.uref_lo)


@dataclass
class Dataset:
    """Rows of ``(e0, dist, u_ref, t) -> (e_t, g)``; split by trajectory."""

    inputs: np.ndarray
    targets: np.ndarray
    traj_id: np.ndarray
    train_idx: np.ndarray
    eval_idx: np.ndarray
    n_err: int
    n_dist: int
    n_uref: int
    dt: float
    n_steps: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets disagree in row count")
        if np.intersect1d(self.train_idx, self.eval_idx).size:
            raise ValueError("train and eval rows overlap")

    @property
    def n_rows(self):
        return len(self.inputs)

    def subset(self, which):
        idx = self.train_idx if which == "train" else self.eval_idx
        return self.inputs[idx], self.targets[idx]


def build_dataset(n_traj, spec, seed=0, eval_frac=0.2):
    """Simulate ``n_traj`` oracle trajectories and flatten them into rows.

    ``spec`` is a :class:`DataSpec` or a scenario.  Initial errors and
    disturbances are drawn uniformly over their supports so the surrogate is
    trained everywhere the estimator will query it.  Trajectories that blow up
    are dropped and logged.
    """
    if not isinstance(spec, DataSpec):
        spec = DataSpec.from_scenario(spec)
    if n_traj < 1:
        raise ValueError("n_traj must be positive")
    rng = np.random.default_rng([int(seed), 11])
    e0 = spec.init_dist.sample_uniform(rng, n_traj)
    dist = spec.dist_dist.sample_uniform(rng, n_traj) if spec.dist_dist is not None else None
    if spec.n_uref:
        uref = spec.uref_lo + (spec.uref_hi - spec.uref_lo) * rng.random((n_traj, spec.n_uref))
        u_steps = np.broadcast_to(uref, (spec.n_steps, n_traj, spec.n_uref))
    else:
        uref, u_steps = None, None
    with np.errstate(all="ignore"):
        tr = integrate_augmented(spec.system, e0, 0.0, u_steps, dist, spec.n_steps, spec.dt, spec.substeps,
                                 check_finite=False)
    ok = np.all(np.isfinite(tr.errors), axis=(0, 2)) & np.all(np.isfinite(tr.log_densities), axis=0)
    for i in np.flatnonzero(~ok):
        log.warning("dropping trajectory %d: non-finite state", i)
    keep = np.flatnonzero(ok)
    T, n = spec.n_steps, len(keep)
    t = spec.dt * np.arange(1, T + 1)
    blocks = [np.repeat(e0[keep], T, axis=0)]
    if dist is not None:
        blocks.append(np.repeat(dist[keep], T, axis=0))
    if uref is not None:
        blocks.append(np.repeat(uref[keep], T, axis=0))
    blocks.append(np.tile(t, n)[:, None])
    inputs = np.hstack(blocks)
    err = tr.errors[1:, keep].transpose(1, 0, 2).reshape(n * T, spec.n_err)
    g = tr.log_densities[1:, keep].T.reshape(n * T, 1)
    targets = np.hstack([err, g])
    traj_id = np.repeat(np.arange(n), T)
    order = rng.permutation(n)
    n_eval = int(round(eval_frac * n))
    eval_traj = np.sort(order[:n_eval])
    is_eval = np.isin(traj_id, eval_traj)
    return Dataset(inputs, targets, traj_id, np.flatnonzero(~is_eval), np.flatnonzero(is_eval),
                   spec.n_err, spec.n_dist, spec.n_uref, spec.dt, T,
                   meta={"n_traj": int(n_traj), "dropped": int(n_traj - n), "seed": int(seed)})


# -------------------------------------------------------------------- model


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    learning_rate: float = 0.03
    momentum: float = 0.9
    seed: int = 0
    w_state: float = 1.0
    w_density: float = 1.0
    decay_at: tuple = (0.6, 0.8)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if not self.learning_rate > 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad learning rate or momentum")
        if self.w_state < 0 or self.w_density < 0 or self.w_state + self.w_density == 0:
            raise ValueError("loss weights must be non-negative and not both zero")

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class MlpModel:
    """ReLU MLP with input normalisation and the gated residual head."""

    def __init__(self, weights, norm, n_err, n_dist, n_uref, dt, n_steps, meta=None):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.norm = {k: np.asarray(v, dtype=float) for k, v in norm.items()}
        self.n_err, self.n_dist, self.n_uref = int(n_err), int(n_dist), int(n_uref)
        self.dt, self.n_steps = float(dt), int(n_steps)
        self.meta = dict(meta or {})

    horizon_steps = property(lambda self: self.n_steps)

    @property
    def horizon(self):
        return self.dt * self.n_steps

    @property
    def n_in(self):
        return self.n_err + self.n_dist + self.n_uref + 1

    @property
    def n_out(self):
        return self.n_err + 1

    @classmethod
    def init(cls, n_err, n_dist, n_uref, dt, n_steps, norm, seed=0, hidden=HIDDEN):
        rng = np.random.default_rng([int(seed), 23])
        sizes = [n_err + n_dist + n_uref + 1, *hidden, n_err + 1]
        weights = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            # small head so training starts near the identity flow
            gain = OUTPUT_GAIN if i == len(sizes) - 2 else 1.0
            weights.append(rng.standard_normal((a, b)) * gain * np.sqrt(2.0 / a))
            weights.append(np.zeros(b))
        return cls(weights, norm, n_err, n_dist, n_uref, dt, n_steps)

    # -- core maths; ``x`` are raw input rows
    def _forward(self, x, weights=None):
        w = self.weights if weights is None else weights
        h = (x - self.norm["x_mean"]) / self.norm["x_std"]
        acts = [h]
        for i in range(0, len(w) - 2, 2):
            h = np.maximum(h @ w[i] + w[i + 1], 0.0)
            acts.append(h)
        raw = h @ w[-2] + w[-1]
        tau = x[:, -1:] / self.horizon
        out = tau * (raw * self.norm["y_scale"] + self.norm["y_shift"])
        out[:, : self.n_err] += x[:, : self.n_err]
        return out, acts, tau

    def predict_rows(self, x):
        return self._forward(np.atleast_2d(np.asarray(x, dtype=float)))[0]

    def loss_and_grad(self, x, y, w_state=1.0, w_density=1.0, weights=None):
        """Weighted normalised MSE and its gradient w.r.t. every parameter."""
        w = self.weights if weights is None else weights
        out, acts, tau = self._forward(x, w)
        d = self.n_err
        sig = self.norm["y_sigma"]
        col_w = np.concatenate([np.full(d, w_state / d), [w_density]])
        r = (out - y) / sig
        loss = float(np.sum(col_w * np.mean(r**2, axis=0)))
        # back through the gated head
        g_out = 2.0 * col_w * r / sig / len(x)
        g_raw = g_out * tau * self.norm["y_scale"]
        grads = [None] * len(w)
        g = g_raw
        for li in range(len(w) - 2, -1, -2):
            a = acts[li // 2]
            grads[li] = a.T @ g
            grads[li + 1] = g.sum(axis=0)
            if li:
                g = (g @ w[li].T) * (a > 0)
        return loss, grads

    # -- public prediction API
    def _inputs(self, e0, dist, u_ref, t):
        e0 = np.atleast_2d(np.asarray(e0, dtype=float))
        n = len(e0)
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (n,))
        if np.any(t < 0) or np.any(t > self.horizon * (1 + 1e-9)):
            raise HorizonExceeded(f"t outside the trained horizon [0, {self.horizon:g}]")
        cols = [e0]
        if self.n_dist:
            cols.append(np.broadcast_to(np.asarray(dist, dtype=float), (n, self.n_dist)))
        if self.n_uref:
            cols.append(np.broadcast_to(np.asarray(u_ref, dtype=float), (n, self.n_uref)))
        cols.append(t[:, None])
        return np.hstack(cols)

    def predict(self, e0, dist=None, u_ref=None, t=0.0):
        """Predicted ``(e_t, g_t)`` for rows of ``e0``."""
        out = self.predict_rows(self._inputs(e0, dist, u_ref, t))
        return out[:, : self.n_err], out[:, self.n_err]

    # -- persistence
    def to_bytes(self, config_hash=""):
        arrays = [("w%d" % i, w) for i, w in enumerate(self.weights)] + sorted(self.norm.items())
        header = {
            "version": FORMAT_VERSION,
            "hidden": [int(w.shape[1]) for w in self.weights[:-2:2]],
            "n_err": self.n_err, "n_dist": self.n_dist, "n_uref": self.n_uref,
            "dt": self.dt, "n_steps": self.n_steps,
            "config_hash": config_hash,
            "meta": self.meta,
            "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", len(hb)))
        buf.write(hb)
        for _, a in arrays:
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data):
        if data[:8] != MAGIC:
            raise ValueError("not a model file")
        (n,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12 : 12 + n])
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {header['version']}")
        pos = 12 + n
        arrs = {}
        for spec in header["arrays"]:
            size = int(np.prod(spec["shape"], dtype=int))
            arrs[spec["name"]] = np.frombuffer(data, "<f8", size, pos).reshape(spec["shape"]).copy()
            pos += 8 * size
        n_w = sum(1 for k in arrs if k.startswith("w"))
        weights = [arrs["w%d" % i] for i in range(n_w)]
        norm = {k: v for k, v in arrs.items() if not k.startswith("w")}
        return cls(weights, norm, header["n_err"], header["n_dist"], header["n_uref"], header["dt"],
                   header["n_steps"], header["meta"])


def _norm_stats(x, y, n_err, horizon):
    x_mean, x_std = x.mean(axis=0), x.std(axis=0)
    x_std = np.where(x_std > 1e-12, x_std, 1.0)
    tau = x[:, -1:] / horizon
    res = y.copy()
    res[:, :n_err] -= x[:, :n_err]
    rate = res / tau
    y_sigma = y.std(axis=0)
    y_sigma = np.where(y_sigma > 1e-6, y_sigma, 1.0)
    y_shift, y_scale = rate.mean(axis=0), rate.std(axis=0)
    # a rate that is already constant needs only small corrections
    y_scale = np.where(y_scale > 1e-12, y_scale, y_sigma)
    return {"x_mean": x_mean, "x_std": x_std, "y_shift": y_shift, "y_scale": y_scale, "y_sigma": y_sigma}


@dataclass
class TrainResult:
    model: MlpModel
    train_loss: float
    eval_loss: float
    history: list


def train(data, cfg=TrainConfig()):
    """Minibatch SGD with momentum; learning rate x0.1 at each ``decay_at`` fraction."""
    x, y = data.subset("train")
    if len(x) == 0:
        raise ValueError("empty training split")
    norm = _norm_stats(x, y, data.n_err, data.dt * data.n_steps)
    model = MlpModel.init(data.n_err, data.n_dist, data.n_uref, data.dt, data.n_steps, norm, cfg.seed)
    model.meta = {"train_config": asdict(cfg), "train_config_hash": cfg.digest()}
    rng = np.random.default_rng([int(cfg.seed), 29])
    vel = [np.zeros_like(w) for w in model.weights]
    bs = min(cfg.batch_size, len(x))
    per_epoch = max(1, len(x) // bs)
    decay_steps = [int(f * cfg.steps) for f in cfg.decay_at]
    history = []
    lr = cfg.learning_rate
    perm = rng.permutation(len(x))
    for step in range(cfg.steps):
        if step in decay_steps:
            lr *= 0.1
        b = step % per_epoch
        if b == 0 and step:
            perm = rng.permutation(len(x))
        idx = perm[b * bs : (b + 1) * bs]
        loss, grads = model.loss_and_grad(x[idx], y[idx], cfg.w_state, cfg.w_density)
        if not np.isfinite(loss):
            raise DivergedTraining(f"loss became {loss} at step {step}")
        for w, v, g in zip(model.weights, vel, grads):
            v *= cfg.momentum
            v -= lr * g
            w += v
        if b == per_epoch - 1 or step == cfg.steps - 1:
            full = evaluate_loss(model, x, y, cfg)
            if not np.isfinite(full):
                raise DivergedTraining(f"training loss became {full}")
            history.append(full)
    xe, ye = data.subset("eval")
    eval_loss = evaluate_loss(model, xe, ye, cfg) if len(xe) else float("nan")
    return TrainResult(model, history[-1], eval_loss, history)


def evaluate_loss(model, x, y, cfg=TrainConfig(), chunk=65536):
    total = 0.0
    for s in range(0, len(x), chunk):
        total += model.loss_and_grad(x[s : s + chunk], y[s : s + chunk], cfg.w_state, cfg.w_density)[0] * len(x[s : s + chunk])
    return total / max(1, len(x))


def rmse(model, data, which="eval"):
    """Raw-unit RMSE of states (pooled over dims) and of the log-density ratio."""
    x, y = data.subset(which)
    out = model.predict_rows(x)
    d = data.n_err
    return (float(np.sqrt(np.mean((out[:, :d] - y[:, :d]) ** 2))),
            float(np.sqrt(np.mean((out[:, d] - y[:, d]) ** 2))))


def gradient_check(model, x, y, n_weights=10, eps=1e-6, seed=0):
    """Max relative gap between backprop and central differences on random weights."""
    _, grads = model.loss_and_grad(x, y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_weights):
        li = int(rng.integers(len(model.weights)))
        flat = int(rng.integers(model.weights[li].size))
        ws = [w.copy() for w in model.weights]
        base = ws[li].flat[flat]
        ws[li].flat[flat] = base + eps
        fp = model.loss_and_grad(x, y, weights=ws)[0]
        ws[li].flat[flat] = base - eps
        fm = model.loss_and_grad(x, y, weights=ws)[0]
        fd = (fp - fm) / (2 * eps)
        an = grads[li].flat[flat]
        worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-10))
    return worst


class ModelPredictor:
    """Drop-in replacement for the Liouville oracle backed by a trained model."""

    def __init__(self, model):
        self.model = model
        self.dt = model.dt
        self.horizon_steps = model.n_steps

    def push(self, e0, dist, u_ref, n_steps):
        if n_steps > self.horizon_steps:
            raise HorizonExceeded(f"{n_steps} steps requested, model trained for {self.horizon_steps}")
        e0 = np.atleast_2d(np.asarray(e0, dtype=float))
        n = len(e0)
        errs = np.empty((n_steps + 1,) + e0.shape)
        g = np.empty((n_steps + 1, n))
        errs[0], g[0] = e0, 0.0
        if n_steps:
            m = self.model
            rep = lambda a, k: None if a is None else np.tile(np.broadcast_to(np.asarray(a, dtype=float), (n, k)), (n_steps, 1))
            rows = m._inputs(np.tile(e0, (n_steps, 1)), rep(dist, m.n_dist) if m.n_dist else None,
                             rep(u_ref, m.n_uref) if m.n_uref else None,
                             np.repeat(np.arange(1, n_steps + 1) * self.dt, n))
            out = m.predict_rows(rows)
            errs[1:] = out[:, : m.n_err].reshape(n_steps, n, -1)
            g[1:] = out[:, -1].reshape(n_steps, n)
        return errs, g
