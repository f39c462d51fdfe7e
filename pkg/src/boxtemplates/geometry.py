"""Axis-aligned boxes, point clouds and distance grids."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadResolution, EmptyCloud, EmptyList, InputError

DEFAULT_GRID_RESOLUTION = 32
DEFAULT_TRUNCATION = 0.25


@dataclass(frozen=True)
class AABox:
    """Axis-aligned box given by its center and full edge lengths."""

    center: tuple
    size: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise InputError("box center and size must have three components")
        if not all(np.isfinite(c + s)):
            raise InputError(f"non-finite box {c}, {s}")
        if min(s) < 0:
            raise InputError(f"negative box size {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_bounds(cls, lo, hi) -> AABox:
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(0.5 * (lo + hi), hi - lo)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)

    @property
    def volume(self) -> float:
        return box_volume(self)

    def corners(self) -> np.ndarray:
        """The 8 corners, x varying fastest."""
        lo, hi = self.lo, self.hi
        out = np.empty((8, 3))
        for k in range(8):
            for a in range(3):
                out[k, a] = hi[a] if (k >> a) & 1 else lo[a]
        return out

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))


@dataclass
class PointCloud:
    """An (n, 3) array of points with optional integer per-point labels."""

    points: np.ndarray
    labels: Optional[np.ndarray] = None
    label_names: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1 and pts.size == 3:
            pts = pts.reshape(1, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InputError(f"expected an (n, 3) point array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InputError("point cloud contains non-finite coordinates")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),):
                raise InputError("labels must have one entry per point")
            self.labels = lab.astype(np.int64)

    def __len__(self):
        return len(self.points)


def as_points(cloud) -> np.ndarray:
    """Return the (n, 3) float array behind a PointCloud or array-like."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    pts = np.asarray(cloud, dtype=float)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"expected an (n, 3) point array, got shape {pts.shape}")
    return pts


def _nonempty_points(cloud) -> np.ndarray:
    pts = as_points(cloud)
    if len(pts) == 0:
        raise EmptyCloud("point cloud is empty")
    return pts


def stack_boxes(boxes: Sequence[AABox]) -> tuple[np.ndarray, np.ndarray]:
    """Box list -> (centers, sizes), both (n, 3)."""
    centers = np.array([b.center for b in boxes], dtype=float).reshape(-1, 3)
    sizes = np.array([b.size for b in boxes], dtype=float).reshape(-1, 3)
    return centers, sizes


def boxes_from_arrays(centers, sizes) -> list[AABox]:
    return [AABox(c, s) for c, s in zip(np.asarray(centers), np.asarray(sizes))]


def point_to_box_distance(p, b: AABox) -> float:
    """Euclidean distance from ``p`` to the solid box; zero inside."""
    p = np.asarray(p, dtype=float)
    excess = np.maximum(np.abs(p - np.asarray(b.center)) - 0.5 * np.asarray(b.size), 0.0)
    return float(np.sqrt(np.dot(excess, excess)))


def points_to_boxes_distance(points, centers, sizes) -> np.ndarray:
    """Distances from every point to every solid box, shape (n_points, n_boxes)."""
    pts = as_points(points)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    half = 0.5 * np.asarray(sizes, dtype=float).reshape(-1, 3)
    excess = np.abs(pts[:, None, :] - centers[None, :, :]) - half[None, :, :]
    np.maximum(excess, 0.0, out=excess)
    return np.sqrt(np.einsum("pnk,pnk->pn", excess, excess))


def box_volume(b: AABox) -> float:
    lx, ly, lz = b.size
    return lx * ly * lz


def box_intersection_volume(a: AABox, b: AABox) -> float:
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    ext = np.maximum(hi - lo, 0.0)
    return float(ext[0] * ext[1] * ext[2])


def bounding_box(cloud) -> AABox:
    pts = _nonempty_points(cloud)
    return AABox.from_bounds(pts.min(axis=0), pts.max(axis=0))


def template_bounding_box(boxes: Iterable[AABox]) -> AABox:
    boxes = list(boxes)
    if not boxes:
        raise EmptyList("template_bounding_box needs at least one box")
    lo = np.min([b.lo for b in boxes], axis=0)
    hi = np.max([b.hi for b in boxes], axis=0)
    return AABox.from_bounds(lo, hi)


def normalize_to_unit_cube(cloud) -> tuple[np.ndarray, np.ndarray, float]:
    """Center the bounding box at the origin and scale its longest edge to 1.

    Returns the normalized points together with the original center and the
    applied scale, so ``points = normalized / scale + center``.
    """
    pts = _nonempty_points(cloud)
    bb = bounding_box(pts)
    center = np.asarray(bb.center)
    longest = max(bb.size)
    scale = 1.0 / longest if longest > 0 else 1.0
    return (pts - center) * scale, center, scale


@dataclass(frozen=True)
class DistanceGrid:
    """Truncated unsigned distance to a point set, sampled at cell centers."""

    resolution: tuple
    origin: tuple
    cell_size: float
    truncation: float
    values: np.ndarray = field(repr=False)

    def cell_centers(self) -> np.ndarray:
        return grid_cell_centers(self.resolution, self.origin, self.cell_size)


def grid_cell_centers(resolution, origin, cell_size) -> np.ndarray:
    """All cell centers in C order, shape (nx*ny*nz, 3)."""
    axes = [np.asarray(origin[a]) + (np.arange(resolution[a]) + 0.5) * cell_size
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def rasterize_distance_grid(cloud, resolution: int = DEFAULT_GRID_RESOLUTION,
                            truncation: float = DEFAULT_TRUNCATION) -> DistanceGrid:
    """Sample min(truncation, distance to nearest point) on a cubic grid.

    Cells are cubes; the grid is centered on the cloud's bounding box and sized
    so that the longest bbox edge leaves one free cell on each side.
    """
    pts = _nonempty_points(cloud)
    if int(resolution) != resolution or resolution < 2:
        raise BadResolution(f"resolution must be an integer >= 2, got {resolution}")
    if not truncation > 0:
        raise InputError(f"truncation must be positive, got {truncation}")
    resolution = int(resolution)
    bb = bounding_box(pts)
    longest = max(bb.size)
    if longest <= 0:
        longest = truncation
    cell = longest / max(resolution - 2, 1)
    mid = np.asarray(bb.center)
    origin = mid - 0.5 * resolution * cell
    res = (resolution,) * 3
    # offsets from the bbox center, so an odd grid has a cell exactly there
    ax = (np.arange(resolution) - 0.5 * (resolution - 1)) * cell
    gx, gy, gz = np.meshgrid(mid[0] + ax, mid[1] + ax, mid[2] + ax, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    dist, _ = cKDTree(pts).query(centers, k=1)
    values = np.minimum(dist, truncation).reshape(res)
    return DistanceGrid(res, tuple(float(v) for v in origin), float(cell),
                        float(truncation), values)
