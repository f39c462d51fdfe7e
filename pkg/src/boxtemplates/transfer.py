"""Structure transfer from the collection onto a partial scan.

The classifier proposes clusters, each proposed cluster's template is fitted
to the scan from the cluster's mean parameters, and the best fit wins.  The
nearest indexed shape in those clusters is then deformed box by box onto the
scan's fitted boxes, giving a complete, labeled recovery.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .classify import MlpModel, cloud_features, predict, top_k
from .collection import CollectionIndex, retrieve_nearest
from .errors import BoxCountMismatch, DegenerateSourceBox, DimensionMismatch, EmptyTemplate
from .fitting import FitConfig, FitResult, Init, fit_template
from .geometry import (AABox, DEFAULT_GRID_RESOLUTION, DEFAULT_TRUNCATION, PointCloud,
                       _nonempty_points, as_points, points_to_boxes_distance, stack_boxes,
                       template_bounding_box)
from .io import Mesh

WEIGHT_FLOOR = 1e-12


@dataclass
class Identification:
    template_id: int
    fit: FitResult
    considered: list = field(default_factory=list)  # (cluster id, probability, e_total)
    probabilities: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "fit": self.fit.to_dict(),
            "considered": [{"cluster": int(c), "probability": float(p), "e_total": float(e)}
                           for c, p, e in self.considered],
        }


@dataclass
class Recovery:
    identification: Identification
    source_id: str
    ranked: list
    geometry: PointCloud  # labeled with the scan's fitted boxes
    residual: float
    mesh: Optional[Mesh] = None  # set when the source is a mesh

    def to_dict(self) -> dict:
        return {
            "format": "boxtemplates-recovery/1",
            "identification": self.identification.to_dict(),
            "source_id": self.source_id,
            "ranked": list(self.ranked),
            "residual": float(self.residual),
            "n_points": len(self.geometry),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def _ratios(l1, l2):
    l1 = np.asarray(l1, dtype=float)
    l2 = np.asarray(l2, dtype=float)
    zero = l1 == 0
    if np.any(zero):
        warnings.warn(f"source box has zero extent on axes {np.flatnonzero(zero).tolist()}; "
                      "using ratio 1 there", DegenerateSourceBox, stacklevel=3)
    return np.where(zero, 1.0, l2 / np.where(zero, 1.0, l1))


def box_affine_map(b1: AABox, b2: AABox, p) -> np.ndarray:
    """Map ``p`` by the axis-aligned affine map carrying ``b1`` onto ``b2``."""
    r = _ratios(b1.size, b2.size)
    return np.asarray(b2.center) + r * (np.asarray(p, dtype=float) - np.asarray(b1.center))


def deform(points, source_boxes, target_boxes, global_scaling: bool = True) -> np.ndarray:
    """Blend per-box affine maps with weights exp(-d^2), then rescale globally.

    d is the distance from a point to the solid source box.  The final step
    maps the deformed points' bounding box onto the target boxes' bounding box
    axis by axis; an axis along which the points are flat is only translated.
    """
    pts = as_points(points)
    source_boxes, target_boxes = list(source_boxes), list(target_boxes)
    if len(source_boxes) != len(target_boxes):
        raise BoxCountMismatch(f"{len(source_boxes)} source boxes vs {len(target_boxes)} targets")
    if not source_boxes:
        raise EmptyTemplate("deform needs at least one box")
    if len(pts) == 0:
        return pts.copy()
    c1, s1 = stack_boxes(source_boxes)
    c2, s2 = stack_boxes(target_boxes)
    r = np.stack([_ratios(a, b) for a, b in zip(s1, s2)])
    d = points_to_boxes_distance(pts, c1, s1)
    w = np.exp(-d ** 2)
    mapped = c2[None] + r[None] * (pts[:, None, :] - c1[None])  # (P, N, 3)
    out = np.einsum("pn,pnk->pk", w, mapped) / (w.sum(axis=1, keepdims=True) + WEIGHT_FLOOR)
    if not global_scaling:
        return out
    tb = template_bounding_box(target_boxes)
    lo, hi = out.min(axis=0), out.max(axis=0)
    ext = hi - lo
    flat = ext <= 0
    scale = np.where(flat, 1.0, np.asarray(tb.size) / np.where(flat, 1.0, ext))
    mid = 0.5 * (lo + hi)
    return np.asarray(tb.center) + scale * (out - mid)


def deform_mesh(mesh: Mesh, source_boxes, target_boxes) -> Mesh:
    """Deform vertices only; the face list is shared unchanged."""
    return Mesh(deform(mesh.vertices, source_boxes, target_boxes), mesh.faces)


def label_points(cloud, boxes, template=None) -> PointCloud:
    """Label each point with its nearest box (solid distance, lowest index on ties)."""
    pts = _nonempty_points(cloud)
    boxes = list(boxes)
    if not boxes:
        raise EmptyTemplate("label_points needs at least one box")
    c, s = stack_boxes(boxes)
    labels = np.argmin(points_to_boxes_distance(pts, c, s), axis=1)
    names = template.node_names if template is not None else None
    return PointCloud(pts.copy(), labels, names)


def identify_partial(scan, index: CollectionIndex, model: MlpModel, k: int = 3,
                     config: FitConfig = FitConfig(),
                     resolution: int = DEFAULT_GRID_RESOLUTION,
                     truncation: float = DEFAULT_TRUNCATION) -> Identification:
    """Fit the templates of the ``k`` most likely clusters; keep the lowest energy.

    Each fit is warm-started from its cluster's centroid.  Equal energies keep
    the more probable cluster.
    """
    pts = _nonempty_points(scan)
    if model.n_classes != index.n_clusters:
        raise DimensionMismatch(f"classifier predicts {model.n_classes} clusters, "
                                f"index has {index.n_clusters}")
    probs = predict(model, cloud_features(pts, resolution, truncation))
    clusters = top_k(probs, k)
    considered, fits = [], []
    for c in clusters:
        t = index.templates[index.cluster_template[c]]
        fit = fit_template(pts, t, [Init(index.centroid(c), "cluster_mean")], config)
        considered.append((c, float(probs[c]), fit.e_total))
        fits.append(fit)
    best = min(range(len(fits)), key=lambda i: (fits[i].e_total, i))
    return Identification(fits[best].template_id, fits[best], considered, probs)


def scan_residual(scan, recovered) -> float:
    """Mean distance from each scan point to its nearest recovered point."""
    d, _ = cKDTree(as_points(recovered)).query(_nonempty_points(scan), k=1)
    return float(np.mean(d))


def recover_shape(scan, index: CollectionIndex, model: MlpModel, k: int = 3,
                  config: FitConfig = FitConfig(),
                  identification: Optional[Identification] = None) -> Recovery:
    """Identify, retrieve the nearest indexed shape, deform it onto the scan fit."""
    ident = identification or identify_partial(scan, index, model, k, config)
    tid = ident.template_id
    clusters = [c for c, _, _ in ident.considered if index.cluster_template[c] == tid]
    ranked = retrieve_nearest(index, clusters, ident.fit.params, template_id=tid)
    source_id = ranked[0]
    src_fit = index.record(source_id).fit
    geom = index.geometry(source_id)
    mesh = None
    if isinstance(geom, Mesh):
        mesh = deform_mesh(geom, src_fit.boxes, ident.fit.boxes)
        pts = mesh.vertices
    else:
        pts = deform(geom, src_fit.boxes, ident.fit.boxes)
    template = index.templates[tid]
    labeled = label_points(pts, ident.fit.boxes, template)
    return Recovery(ident, source_id, ranked, labeled, scan_residual(scan, pts), mesh)
