"""Convex hulls of projected sample clouds (footprints for heatmaps and plots)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def monotone_chain(points):
    """Counter-clockwise hull vertices of 2D points (Andrew's algorithm).

    Collinear boundary points are dropped.  Degenerate inputs return the
    distinct points (one or two of them).
    """
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)
    lower = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def polygon_contains(hull, points, tol=1e-9):
    """Points inside or on a CCW convex polygon."""
    hull = np.asarray(hull, dtype=float)
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if len(hull) < 3:
        return np.zeros(len(points), dtype=bool)
    a = hull
    b = np.roll(hull, -1, axis=0)
    edge = b - a
    rel = points[:, None, :] - a[None, :, :]
    cross = edge[None, :, 0] * rel[..., 1] - edge[None, :, 1] * rel[..., 0]
    scale = np.linalg.norm(edge, axis=1)[None, :]
    return np.all(cross >= -tol * scale, axis=1)


def polygon_area(hull):
    hull = np.asarray(hull, dtype=float)
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


class ProjectedHull:
    """Hull of projected positions: monotone chain in 2D, qhull (quickhull) in 3D."""

    def __init__(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        self.dim = points.shape[1]
        if self.dim == 2:
            self.vertices = monotone_chain(points)
            self._eq = None
        elif self.dim == 3:
            hull = ConvexHull(points)
            self.vertices = points[hull.vertices]
            self._eq = hull.equations
        else:
            raise ValueError("projected hulls are 2D or 3D")

    def contains(self, points, tol=1e-9):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.dim == 2:
            return polygon_contains(self.vertices, points, tol)
        return np.all(points @ self._eq[:, :-1].T + self._eq[:, -1] <= tol, axis=1)

    @property
    def measure(self):
        if self.dim == 2:
            return polygon_area(self.vertices)
        return float(ConvexHull(self.vertices).volume)
