"""Simulated single-view partial scans.

Points are projected orthographically along the view direction onto a square
depth grid.  A point survives when it lies within one cell of the nearest
depth splatted into its cell, so points behind a visible surface are culled.
Survivors are jittered with Gaussian noise and randomly dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BadConfig, DegenerateScan
from .geometry import PointCloud, _nonempty_points


@dataclass(frozen=True)
class ScanConfig:
    viewpoint: Optional[tuple] = None  # direction toward the camera; None -> random
    depth_grid: int = 64
    noise_sigma: float = 0.005
    dropout_rate: float = 0.1
    seed: int = 0
    depth_tolerance: Optional[float] = None  # None -> one grid cell
    splat: int = 1  # cells each point covers in the depth buffer, per side

    def __post_init__(self):
        if int(self.depth_grid) != self.depth_grid or self.depth_grid < 1:
            raise BadConfig(f"depth_grid must be a positive integer, got {self.depth_grid}")
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0):
            raise BadConfig(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        if not (0 <= self.dropout_rate < 1):
            raise BadConfig(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.viewpoint is not None:
            v = np.asarray(self.viewpoint, dtype=float)
            if v.shape != (3,) or not np.all(np.isfinite(v)) or not np.any(v):
                raise BadConfig(f"viewpoint must be a finite nonzero 3-vector, got {self.viewpoint}")
        if self.splat < 0:
            raise BadConfig("splat must be >= 0")


def random_view(rng) -> np.ndarray:
    """Uniform direction on the upper (+Y) hemisphere."""
    while True:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
        if n > 1e-9:
            v /= n
            v[1] = abs(v[1])
            return v


def view_basis(v) -> np.ndarray:
    """Rows (u, w, v): two image axes and the unit view direction."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    helper = np.array([0.0, 1.0, 0.0]) if abs(v[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, v)
    u /= np.linalg.norm(u)
    w = np.cross(v, u)
    return np.stack([u, w, v])


def visible_mask(points, view, depth_grid: int = 64, tolerance: Optional[float] = None,
                 splat: int = 1) -> np.ndarray:
    """Boolean mask of points not occluded when looking from ``view``."""
    pts = np.asarray(points, dtype=float)
    basis = view_basis(view)
    uvw = pts @ basis.T
    depth = -uvw[:, 2]  # distance from the camera, smaller is closer
    uv = uvw[:, :2]
    lo = uv.min(axis=0)
    span = float(np.max(uv.max(axis=0) - lo))
    cell = span / depth_grid if span > 0 else 1.0
    ij = np.minimum(((uv - lo) / cell).astype(np.int64), depth_grid - 1)
    tol = cell if tolerance is None else float(tolerance)
    zbuf = np.full((depth_grid, depth_grid), np.inf)
    for di in range(-splat, splat + 1):
        for dj in range(-splat, splat + 1):
            ii = np.clip(ij[:, 0] + di, 0, depth_grid - 1)
            jj = np.clip(ij[:, 1] + dj, 0, depth_grid - 1)
            np.minimum.at(zbuf, (ii, jj), depth)
    return depth <= zbuf[ij[:, 0], ij[:, 1]] + tol


def simulate_partial_scan(cloud, config: ScanConfig = ScanConfig()) -> PointCloud:
    """Depth-culled, noisy, thinned view of ``cloud``; labels are carried along."""
    pts = _nonempty_points(cloud)
    labels = cloud.labels if isinstance(cloud, PointCloud) else None
    names = cloud.label_names if isinstance(cloud, PointCloud) else None
    rng = np.random.default_rng(config.seed)
    view = random_view(rng) if config.viewpoint is None else np.asarray(config.viewpoint, float)
    keep = visible_mask(pts, view, config.depth_grid, config.depth_tolerance, config.splat)
    if config.dropout_rate > 0:
        keep &= rng.random(len(pts)) >= config.dropout_rate
    if not keep.any():
        raise DegenerateScan("every point was culled from the simulated scan")
    out = pts[keep]
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, size=out.shape)
    return PointCloud(out, None if labels is None else labels[keep], names)


def occlude_half(cloud, rng, direction=None) -> PointCloud:
    """Remove the points on one side of a plane through the bbox center.

    The plane normal is a random horizontal direction unless given.
    """
    pts = _nonempty_points(cloud)
    if direction is None:
        a = rng.uniform(0, 2 * np.pi)
        direction = np.array([np.cos(a), 0.0, np.sin(a)])
    d = np.asarray(direction, dtype=float)
    mid = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    keep = (pts - mid) @ d <= 0
    if not keep.any():
        raise DegenerateScan("occlusion removed every point")
    labels = cloud.labels if isinstance(cloud, PointCloud) else None
    names = cloud.label_names if isinstance(cloud, PointCloud) else None
    return PointCloud(pts[keep], None if labels is None else labels[keep], names)
