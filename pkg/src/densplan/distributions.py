"""Box-supported product distributions for initial errors and disturbances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import truncnorm

KINDS = ("gaussian-truncated", "uniform-box")


@dataclass(frozen=True, eq=False)
class InitialDistribution:
    """Independent per-dimension distribution on the box ``[lo, hi]``.

    ``gaussian-truncated`` uses a normal with ``center``/``scale`` truncated to
    the box; ``uniform-box`` ignores ``center``/``scale``.  Dimensions with
    ``lo == hi`` are point masses and contribute a factor 1 to the density
    (the density is taken w.r.t. the non-degenerate coordinates only).
    """

    kind: str
    center: np.ndarray
    scale: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    _log_norm: float = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        for name in ("center", "scale", "lo", "hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        shapes = {a.shape for a in (self.center, self.scale, self.lo, self.hi)}
        if len(shapes) != 1:
            raise ValueError("center, scale, lo, hi must share one shape")
        if np.any(self.hi < self.lo):
            raise ValueError("support upper bound below lower bound")
        free = self.free
        if self.kind == "gaussian-truncated" and np.any(self.scale[free] <= 0):
            raise ValueError("gaussian scale must be positive on non-degenerate dims")
        if self.kind == "uniform-box":
            log_norm = -np.sum(np.log(self.hi[free] - self.lo[free]))
        else:
            a = (self.lo[free] - self.center[free]) / self.scale[free]
            b = (self.hi[free] - self.center[free]) / self.scale[free]
            mass = ndtr(b) - ndtr(a)
            log_norm = -np.sum(np.log(mass * self.scale[free] * np.sqrt(2 * np.pi)))
        object.__setattr__(self, "_log_norm", float(log_norm))

    @classmethod
    def gaussian(cls, center, scale, width=3.0):
        """Gaussian truncated at ``center +/- width*scale``."""
        center = np.atleast_1d(np.asarray(center, dtype=float))
        scale = np.atleast_1d(np.asarray(scale, dtype=float))
        return cls("gaussian-truncated", center, scale, center - width * scale, center + width * scale)

    @classmethod
    def uniform(cls, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        return cls("uniform-box", (lo + hi) / 2, hi - lo, lo, hi)

    @classmethod
    def point(cls, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls("uniform-box", value, np.zeros_like(value), value, value)

    @property
    def dim(self):
        return self.center.size

    @property
    def free(self):
        return self.hi > self.lo

    @property
    def support_volume(self):
        free = self.free
        return float(np.prod(self.hi[free] - self.lo[free]))

    def inside(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        inside = self.inside(x)
        if self.kind == "uniform-box":
            out = np.full(x.shape[:-1], self._log_norm)
        else:
            free = self.free
            z = (x[..., free] - self.center[free]) / self.scale[free]
            out = self._log_norm - 0.5 * np.sum(z * z, axis=-1)
        return np.where(inside, out, -np.inf)

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, rng, n):
        """Draw ``n`` points from the distribution itself."""
        if self.kind == "uniform-box":
            return self.sample_uniform(rng, n)
        out = np.tile(self.center, (n, 1))
        free = np.flatnonzero(self.free)
        if free.size:
            a = (self.lo[free] - self.center[free]) / self.scale[free]
            b = (self.hi[free] - self.center[free]) / self.scale[free]
            out[:, free] = truncnorm.rvs(
                a, b, loc=self.center[free], scale=self.scale[free], size=(n, free.size), random_state=rng
            )
        return out

    def sample_uniform(self, rng, n):
        """Draw ``n`` points uniformly over the support box."""
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Product of independent distributions, concatenated along the last axis."""

    parts: tuple

    @property
    def dim(self):
        return sum(p.dim for p in self.parts)

    @property
    def lo(self):
        return np.concatenate([p.lo for p in self.parts])

    @property
    def hi(self):
        return np.concatenate([p.hi for p in self.parts])

    @property
    def support_volume(self):
        return float(np.prod([p.support_volume for p in self.parts]))

    def _split(self, x):
        out, i = [], 0
        for p in self.parts:
            out.append(x[..., i : i + p.dim])
            i += p.dim
        return out

    def inside(self, x):
        return np.all([p.inside(xi) for p, xi in zip(self.parts, self._split(x))], axis=0)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return sum(p.log_density(xi) for p, xi in zip(self.parts, self._split(x)))

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, rng, n):
        return np.concatenate([p.sample(rng, n) for p in self.parts], axis=-1)

    def sample_uniform(self, rng, n):
        return np.concatenate([p.sample_uniform(rng, n) for p in self.parts], axis=-1)
