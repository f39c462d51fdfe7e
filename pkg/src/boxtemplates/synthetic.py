"""Synthetic shapes drawn from templates, with ground-truth part labels.

Instances are produced by perturbing a template's rest pose: part sizes are
scaled by log-normal factors (optionally around a per-cluster "style"), and
each child keeps its relative placement on the parent face.  Layouts with
overlapping parts are rejected, and every instance is normalized to the unit
cube.  Surface samples exclude faces hidden by contact with another part.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import batch_energy_terms
from .geometry import AABox, PointCloud, boxes_from_arrays, stack_boxes
from .template import Template, decode, encode


@dataclass
class SyntheticShape:
    shape_id: str
    template_id: int
    params: np.ndarray
    boxes: list
    cloud: PointCloud  # labels are ground-truth box indices
    style: int = -1


def normalize_boxes(boxes) -> list:
    """Uniformly rescale a layout so its bounding box is the centered unit cube."""
    c, s = stack_boxes(boxes)
    lo = (c - 0.5 * s).min(axis=0)
    hi = (c + 0.5 * s).max(axis=0)
    mid = 0.5 * (lo + hi)
    scale = 1.0 / float(np.max(hi - lo))
    return boxes_from_arrays((c - mid) * scale, s * scale)


def _rest_boxes(t: Template) -> list:
    if t.layout_params is not None:
        return decode(t, t.layout_params)
    from .fitting import generic_layout
    return generic_layout(t)


def style_factors(t: Template, rng, magnitude: float = 0.35) -> np.ndarray:
    """Random per-node, per-axis log size offsets defining one shape style."""
    return rng.normal(0.0, magnitude, size=(t.n_boxes, 3))


def random_boxes(t: Template, rng, spread: float = 0.2, style=None,
                 max_tries: int = 200) -> list:
    """A random overlap-free instance of ``t``, normalized to the unit cube."""
    codec = t.codec
    rest = _rest_boxes(t)
    rc, rs = stack_boxes(rest)
    for _ in range(max_tries):
        logf = rng.normal(0.0, spread, size=(t.n_boxes, 3))
        if style is not None:
            logf = logf + style
        shift = rng.normal(0.0, 0.5 * spread, size=(t.n_boxes, 3))
        c = np.empty_like(rc)
        s = rs * np.exp(logf)
        for i in codec.order:
            r = codec.role[i]
            if r[0] == "root":
                c[i] = rc[i]
                continue
            conn = r[1]
            par = conn.parent
            if r[0] == "mirror":
                rep, mirrored = r[2], r[3]
                s[i] = s[rep]
                c[i] = c[rep]
                for a in mirrored:
                    c[i, a] = 2 * c[par, a] - c[rep, a]
                continue
            # keep the child at the same relative spot on the parent face
            rel = (rc[i] - rc[par]) / np.maximum(rs[par], 1e-12)
            rel = rel + shift[i] * 0.2
            c[i] = c[par] + rel * s[par]
            # keep the child footprint inside the parent face where it was inside
            for a in range(3):
                if a == conn.axis:
                    continue
                half_room = 0.5 * s[par, a]
                lo = c[i, a] - 0.5 * s[i, a]
                hi = c[i, a] + 0.5 * s[i, a]
                if rest_inside(rc, rs, i, par, a):
                    if hi - lo > 2 * half_room:
                        s[i, a] = 2 * half_room * 0.95
                    c[i, a] = np.clip(c[i, a], c[par, a] - half_room + 0.5 * s[i, a],
                                      c[par, a] + half_room - 0.5 * s[i, a])
            a = conn.axis
            c[i, a] = c[par, a] + conn.side * 0.5 * (s[par, a] + s[i, a])
        boxes = boxes_from_arrays(c, s)
        params = encode(t, boxes)
        cc, ss = codec.decode_batch(params)
        if batch_energy_terms(np.zeros((1, 3)), cc, ss, 0.0)[0, 3] > 0:
            continue
        return normalize_boxes(boxes_from_arrays(cc, ss))
    raise RuntimeError(f"could not draw an overlap-free instance of template {t.template_id}")


def rest_inside(rc, rs, i, par, a) -> bool:
    lo, hi = rc[i, a] - 0.5 * rs[i, a], rc[i, a] + 0.5 * rs[i, a]
    plo, phi = rc[par, a] - 0.5 * rs[par, a], rc[par, a] + 0.5 * rs[par, a]
    return lo >= plo - 1e-9 and hi <= phi + 1e-9


def sample_surface(boxes, n: int, rng, eps: float = 1e-7) -> PointCloud:
    """Area-weighted samples of the union surface; labels are box indices.

    Points inside another box, or on a face pressed against another box, are
    rejected, so contact regions between parts receive no samples.
    """
    c, s = stack_boxes(boxes)
    faces = []  # (box, axis, side, area)
    for i in range(len(boxes)):
        for a in range(3):
            area = s[i, (a + 1) % 3] * s[i, (a + 2) % 3]
            for side in (-1, 1):
                faces.append((i, a, side, area))
    areas = np.array([f[3] for f in faces])
    if areas.sum() <= 0:
        raise ValueError("layout has no surface area")
    prob = areas / areas.sum()
    pts_out, lab_out = [], []
    got = 0
    while got < n:
        m = max(2 * (n - got), 64)
        which = rng.choice(len(faces), size=m, p=prob)
        u = rng.random((m, 3)) - 0.5
        fi = np.array([faces[k][0] for k in which])
        fa = np.array([faces[k][1] for k in which])
        fs = np.array([faces[k][2] for k in which])
        u[np.arange(m), fa] = 0.5 * fs
        p = c[fi] + u * s[fi]
        probe = p.copy()
        probe[np.arange(m), fa] += fs * eps
        keep = np.ones(m, dtype=bool)
        for j in range(len(boxes)):
            lo, hi = c[j] - 0.5 * s[j], c[j] + 0.5 * s[j]
            other = fi != j
            inside_probe = np.all((probe >= lo) & (probe <= hi), axis=1)
            inside_pt = np.all((p > lo) & (p < hi), axis=1)
            keep &= ~(other & (inside_probe | inside_pt))
        p, fi = p[keep], fi[keep]
        take = min(len(p), n - got)
        pts_out.append(p[:take])
        lab_out.append(fi[:take])
        got += take
    return PointCloud(np.concatenate(pts_out), np.concatenate(lab_out))


def make_shape(t: Template, rng, n_points: int = 2048, spread: float = 0.2,
               style=None, shape_id: str = "", style_id: int = -1) -> SyntheticShape:
    boxes = random_boxes(t, rng, spread=spread, style=style)
    params = encode(t, boxes)
    boxes = decode(t, params)
    cloud = sample_surface(boxes, n_points, rng)
    cloud.label_names = t.node_names
    return SyntheticShape(shape_id or f"{t.name}", t.template_id, params, boxes, cloud, style_id)


def _feasible_style(t: Template, rng, magnitude: float, spread: float):
    # some extreme styles leave no room for the mirrored parts; redraw those
    for _ in range(50):
        style = style_factors(t, rng, magnitude)
        try:
            random_boxes(t, np.random.default_rng(0), spread, style, max_tries=50)
            return style
        except RuntimeError:
            continue
    raise RuntimeError(f"no feasible style for template {t.template_id}")


def make_collection(templates, shapes_per_template: int, rng, styles_per_template: int = 3,
                    n_points: int = 2048, spread: float = 0.08,
                    style_magnitude: float = 0.35) -> list:
    """Shapes clustered into distinct styles per template.

    Each template gets ``styles_per_template`` random feasible styles; shapes are
    assigned to styles round robin and jittered by ``spread``.
    """
    out = []
    for t in templates:
        styles = [_feasible_style(t, rng, style_magnitude, spread)
                  for _ in range(styles_per_template)]
        for k in range(shapes_per_template):
            sid = k % styles_per_template
            out.append(make_shape(t, rng, n_points, spread, styles[sid],
                                  shape_id=f"{t.name}_{k:03d}", style_id=sid))
    return out


def box_surface_cloud(box: AABox, n: int, rng) -> np.ndarray:
    return sample_surface([box], n, rng).points
