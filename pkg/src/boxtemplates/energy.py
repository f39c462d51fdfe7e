"""Fitting energies of a box layout against a point cloud.

Four terms, combined linearly:

* projection   sum over points of the distance to the nearest (solid) box
* bbox         |volume of the layout's bounding box - volume of the cloud's|
* minimalism   total box volume
* disentangle  sum over ordered pairs i != j of overlap volume (each
               unordered pair therefore counts twice)

The batched kernel evaluates all terms for a whole CMA-ES population at once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numba
import numpy as np

from .errors import EmptyTemplate, InputError
from .geometry import _nonempty_points, bounding_box, stack_boxes
from .template import Template


@dataclass(frozen=True)
class EnergyWeights:
    lambda_proj: float = 0.3
    lambda_bbox: float = 1.0
    lambda_min: float = 0.8
    lambda_disent: float = 0.4

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise InputError(f"energy weight {name} must be finite and >= 0, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda_proj, self.lambda_bbox, self.lambda_min, self.lambda_disent])

    @classmethod
    def parse(cls, text: str) -> EnergyWeights:
        """Parse ``"a,b,c,d"`` in (proj, bbox, min, disent) order."""
        try:
            vals = [float(v) for v in text.split(",")]
        except ValueError:
            raise InputError(f"cannot parse weights {text!r}") from None
        if len(vals) != 4:
            raise InputError(f"expected four comma-separated weights, got {text!r}")
        return cls(*vals)


@dataclass(frozen=True)
class EnergyBreakdown:
    e_proj: float
    e_bbox: float
    e_min: float
    e_disent: float
    e_total: float

    @classmethod
    def combine(cls, terms, weights: EnergyWeights) -> EnergyBreakdown:
        terms = [float(t) for t in terms]
        total = float(np.dot(weights.as_array(), terms))
        return cls(*terms, total)

    def terms(self) -> np.ndarray:
        return np.array([self.e_proj, self.e_bbox, self.e_min, self.e_disent])


@numba.njit(cache=True, nogil=True)
def _proj_kernel(points, centers, sizes, out):
    nb, nbox = centers.shape[0], centers.shape[1]
    npts = points.shape[0]
    for b in range(nb):
        acc = 0.0
        for p in range(npts):
            best = np.inf
            for j in range(nbox):
                d2 = 0.0
                for a in range(3):
                    e = abs(points[p, a] - centers[b, j, a]) - 0.5 * sizes[b, j, a]
                    if e > 0.0:
                        d2 += e * e
                if d2 < best:
                    best = d2
                    if best == 0.0:
                        break
            acc += np.sqrt(best)
        out[b] = acc


@numba.njit(cache=True, nogil=True)
def _volume_kernel(centers, sizes, cloud_bbox_volume, out_bbox, out_min, out_dis):
    nb, nbox = centers.shape[0], centers.shape[1]
    for b in range(nb):
        vol = 0.0
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for j in range(nbox):
            vol += sizes[b, j, 0] * sizes[b, j, 1] * sizes[b, j, 2]
            for a in range(3):
                l = centers[b, j, a] - 0.5 * sizes[b, j, a]
                h = centers[b, j, a] + 0.5 * sizes[b, j, a]
                if l < lo[a]:
                    lo[a] = l
                if h > hi[a]:
                    hi[a] = h
        out_min[b] = vol
        out_bbox[b] = abs((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]) - cloud_bbox_volume)
        dis = 0.0
        for i in range(nbox):
            for j in range(i + 1, nbox):
                ov = 1.0
                for a in range(3):
                    l = max(centers[b, i, a] - 0.5 * sizes[b, i, a],
                            centers[b, j, a] - 0.5 * sizes[b, j, a])
                    h = min(centers[b, i, a] + 0.5 * sizes[b, i, a],
                            centers[b, j, a] + 0.5 * sizes[b, j, a])
                    if h <= l:
                        ov = 0.0
                        break
                    ov *= h - l
                dis += ov
        out_dis[b] = 2.0 * dis


def batch_energy_terms(points, centers, sizes, cloud_bbox_volume: float) -> np.ndarray:
    """Energy terms for many layouts at once.

    ``centers`` and ``sizes`` have shape (batch, n_boxes, 3); returns an array
    of shape (batch, 4) ordered (proj, bbox, min, disent).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    sizes = np.ascontiguousarray(sizes, dtype=np.float64)
    if centers.ndim == 2:
        centers, sizes = centers[None], sizes[None]
    if centers.shape[1] == 0:
        raise EmptyTemplate("layout has no boxes")
    nb = centers.shape[0]
    out = np.empty((4, nb))
    _proj_kernel(points, centers, sizes, out[0])
    _volume_kernel(centers, sizes, float(cloud_bbox_volume), out[1], out[2], out[3])
    return out.T.copy()


def _boxes(boxes) -> tuple[np.ndarray, np.ndarray]:
    boxes = list(boxes)
    if not boxes:
        raise EmptyTemplate("template has no boxes")
    return stack_boxes(boxes)


def e_proj(cloud, boxes) -> float:
    pts = _nonempty_points(cloud)
    c, s = _boxes(boxes)
    out = np.empty(1)
    _proj_kernel(pts.astype(np.float64), c[None], s[None], out)
    return float(out[0])


def e_bbox(cloud, boxes) -> float:
    pts = _nonempty_points(cloud)
    c, s = _boxes(boxes)
    return float(batch_energy_terms(pts[:1], c, s, bounding_box(pts).volume)[0, 1])


def e_min(boxes) -> float:
    c, s = _boxes(boxes)
    return float(batch_energy_terms(np.zeros((1, 3)), c, s, 0.0)[0, 2])


def e_disent(boxes) -> float:
    c, s = _boxes(boxes)
    return float(batch_energy_terms(np.zeros((1, 3)), c, s, 0.0)[0, 3])


def breakdown(cloud, boxes, weights: EnergyWeights = EnergyWeights()) -> EnergyBreakdown:
    pts = _nonempty_points(cloud)
    c, s = _boxes(boxes)
    terms = batch_energy_terms(pts, c, s, bounding_box(pts).volume)[0]
    return EnergyBreakdown.combine(terms, weights)


def e_total(cloud, template: Template, params,
            weights: EnergyWeights = EnergyWeights()) -> EnergyBreakdown:
    """Decode ``params`` once and evaluate every term."""
    pts = _nonempty_points(cloud)
    c, s = template.codec.decode_batch(np.asarray(params, dtype=float).reshape(-1))
    terms = batch_energy_terms(pts, c, s, bounding_box(pts).volume)[0]
    return EnergyBreakdown.combine(terms, weights)

