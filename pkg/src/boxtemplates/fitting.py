"""Multi-start CMA-ES template fitting and template selection."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .cmaes import CmaConfig, minimize
from .energy import EnergyBreakdown, EnergyWeights, batch_energy_terms
from .errors import NoCandidates, NoRestarts, ParseError
from .geometry import (AABox, _nonempty_points, bounding_box, boxes_from_arrays,
                       points_to_boxes_distance, stack_boxes)
from .template import Template, decode, encode

FIT_FORMAT = "boxtemplates-fit/1"
TIE_RTOL = 1e-4  # relative energy gap below which two templates count as tied
DEFAULT_CMA = CmaConfig(sigma0=0.01, max_evals=8000, tol_x=1e-9, seed=0)


@dataclass(frozen=True)
class FitConfig:
    weights: EnergyWeights = EnergyWeights()
    restarts: int = 4
    cma: CmaConfig = DEFAULT_CMA
    sample_count: int = 2048
    init_jitter: float = 0.03  # search-space noise added to extra default starts
    init_size_spread: float = 0.25  # log-normal part-size spread of extra default starts
    refine_init: int = 3  # nearest-box refit rounds applied to every other default start
    repair_evals: int = 3000  # CMA-ES budget for re-seeding collapsed parts of the best fit
    polish_evals: int = 4000
    threads: int = 1


@dataclass(frozen=True)
class Init:
    params: np.ndarray
    source: str = "warm_start"


@dataclass
class FitResult:
    template_id: int
    params: np.ndarray
    boxes: list
    breakdown: EnergyBreakdown
    evaluations: int
    init_source: str = "default"
    run_energies: list = field(default_factory=list)
    evaluations_to_best: int = 0  # within the winning run

    @property
    def e_total(self) -> float:
        return self.breakdown.e_total

    def to_dict(self) -> dict:
        b = self.breakdown
        return {
            "format": FIT_FORMAT,
            "template_id": int(self.template_id),
            "params": [float(v) for v in self.params],
            "boxes": [{"center": list(x.center), "size": list(x.size)} for x in self.boxes],
            "breakdown": {"e_proj": b.e_proj, "e_bbox": b.e_bbox, "e_min": b.e_min,
                          "e_disent": b.e_disent, "e_total": b.e_total},
            "evaluations": int(self.evaluations),
            "init_source": self.init_source,
            "run_energies": [float(v) for v in self.run_energies],
            "evaluations_to_best": int(self.evaluations_to_best),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FitResult:
        if not isinstance(d, dict):
            raise ParseError("fit document must be a JSON object")
        if d.get("format") != FIT_FORMAT:
            raise ParseError(f"not a fit document (format {d.get('format')!r})", field="format")
        try:
            b = d["breakdown"]
            return cls(
                int(d["template_id"]),
                np.array(d["params"], dtype=float),
                [AABox(x["center"], x["size"]) for x in d["boxes"]],
                EnergyBreakdown(b["e_proj"], b["e_bbox"], b["e_min"], b["e_disent"], b["e_total"]),
                int(d["evaluations"]),
                d.get("init_source", "default"),
                list(d.get("run_energies", [])),
                int(d.get("evaluations_to_best", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed fit document: {exc}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> FitResult:
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed fit document: {exc.msg}", line=exc.lineno) from None


def farthest_point_sample(points, n: int, seed: int = 0) -> np.ndarray:
    """Deterministic farthest-point subsample of ``n`` points (all if fewer)."""
    pts = _nonempty_points(points)
    if len(pts) <= n:
        return pts.copy()
    rng = np.random.default_rng(seed)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(len(pts))
    d = np.sum((pts - pts[chosen[0]]) ** 2, axis=1)
    for k in range(1, n):
        chosen[k] = int(np.argmax(d))
        np.minimum(d, np.sum((pts - pts[chosen[k]]) ** 2, axis=1), out=d)
    return pts[np.sort(chosen)]


def prepare_cloud(cloud, config: FitConfig = FitConfig()) -> np.ndarray:
    """The point set the energies are evaluated on."""
    return farthest_point_sample(cloud, config.sample_count, config.cma.seed)


def generic_layout(t: Template) -> list:
    """Fallback rest pose for templates authored without one.

    The root is a unit cube; each child takes half its parent's extent on
    every axis and sits centered on its attachment face, except that group
    members are pushed toward the mirrored corners so they do not collide.
    """
    codec = t.codec
    c = np.zeros((t.n_boxes, 3))
    s = np.ones((t.n_boxes, 3))
    group_of = {g.members[0]: g for g in codec.groups}
    for i in codec.order:
        r = codec.role[i]
        if r[0] == "root":
            continue
        conn, par = r[1], r[1].parent
        if r[0] == "mirror":
            rep, mirrored = r[2], r[3]
            s[i] = s[rep]
            c[i] = c[rep]
            for a in mirrored:
                c[i, a] = 2 * c[par, a] - c[rep, a]
            continue
        s[i] = 0.5 * s[par]
        c[i] = c[par]
        g = group_of.get(i)
        if g is not None:
            for a in g.mirror_axes:
                if a != conn.axis:
                    s[i, a] = 0.25 * s[par, a]
                    c[i, a] = c[par, a] + 0.5 * (s[par, a] - s[i, a])
        a = conn.axis
        c[i, a] = c[par, a] + conn.side * 0.5 * (s[par, a] + s[i, a])
    return decode(t, encode(t, boxes_from_arrays(c, s)))


def default_init(cloud, t: Template, size_spread: float = 0.0, rng=None) -> np.ndarray:
    """Rest pose stretched per axis onto the cloud's bounding box.

    With ``size_spread`` > 0 every part size is first scaled by a log-normal
    factor, giving a start with different part proportions.
    """
    pts = _nonempty_points(cloud)
    rest = decode(t, t.layout_params) if t.layout_params is not None else generic_layout(t)
    if size_spread > 0:
        p = encode(t, rest)
        mask = t.codec.size_mask
        p[mask] *= np.exp(np.random.default_rng(rng).normal(0.0, size_spread, int(mask.sum())))
        rest = decode(t, p)
    rc, rs = stack_boxes(rest)
    rlo = (rc - 0.5 * rs).min(axis=0)
    rext = (rc + 0.5 * rs).max(axis=0) - rlo
    bb = bounding_box(pts)
    lo, ext = bb.lo, np.asarray(bb.size)
    floor = max(float(ext.max()), 1e-6) * 1e-3
    ext = np.maximum(ext, floor)
    scale = ext / np.maximum(rext, 1e-12)
    return encode(t, boxes_from_arrays(lo + (rc - rlo) * scale, rs * scale))


class SearchSpace:
    """Normalized face coordinates for CMA-ES.

    Every search coordinate is the position of one box face, shifted to the
    cloud's bbox center and divided by its longest edge.  A free axis
    contributes its low and high faces; a connector axis contributes only the
    far face of the child, stored absolutely so moving the parent's face does
    not drag the child's outer face along.  With this choice most coordinates
    touch a single face, which keeps the kinked energy close to separable.
    """

    def __init__(self, t: Template, points: np.ndarray):
        bb = bounding_box(points)
        self.codec = t.codec
        self.extent = max(max(bb.size), 1e-9)
        self.origin = np.asarray(bb.center)

    def _n(self, x, a):
        return (x - self.origin[a]) / self.extent

    def _a(self, z, a):
        return z * self.extent + self.origin[a]

    def to_z(self, params) -> np.ndarray:
        codec = self.codec
        p = codec.check_length(params)
        C, S = codec.decode_batch(p)
        z = np.empty_like(p)
        for i in codec.order:
            r = codec.role[i]
            cidx, sidx = codec.slots[i]
            if r[0] == "mirror":
                continue
            free = dict(enumerate(cidx)) if r[0] == "root" else cidx
            for a, k in free.items():
                z[..., k] = self._n(p[..., k] - 0.5 * p[..., sidx[a]], a)
                z[..., sidx[a]] = self._n(p[..., k] + 0.5 * p[..., sidx[a]], a)
            if r[0] == "free":
                conn = r[1]
                a = conn.axis
                face = C[..., conn.parent, a] + conn.side * 0.5 * S[..., conn.parent, a]
                z[..., sidx[a]] = self._n(face + conn.side * p[..., sidx[a]], a)
        return z

    def face_pairs(self) -> list:
        """(low face, high face) coordinate index pairs of every free box axis."""
        codec = self.codec
        pairs = []
        for i in codec.order:
            r = codec.role[i]
            if r[0] == "mirror":
                continue
            cidx, sidx = codec.slots[i]
            free = dict(enumerate(cidx)) if r[0] == "root" else cidx
            pairs += [(k, sidx[a]) for a, k in free.items()]
        return pairs

    def part_coordinates(self, i: int) -> list:
        """Coordinates of box ``i``'s own faces plus the parent face it rests on."""
        codec = self.codec
        r = codec.role[i]
        if r[0] == "mirror":
            return []
        cidx, sidx = codec.slots[i]
        free = dict(enumerate(cidx)) if r[0] == "root" else cidx
        out = [j for a, k in free.items() for j in (k, sidx[a])]
        if r[0] == "free":
            conn = r[1]
            a = conn.axis
            out.append(sidx[a])
            pr = codec.role[conn.parent]
            pc, ps = codec.slots[conn.parent]
            pfree = dict(enumerate(pc)) if pr[0] == "root" else pc
            if a in pfree:
                out.append(ps[a] if conn.side > 0 else pfree[a])
        return out

    def set_faces(self, z, i: int, lo, hi) -> None:
        """Write box ``i``'s faces (world coordinates) into search vector ``z``."""
        r = self.codec.role[i]
        cidx, sidx = self.codec.slots[i]
        free = dict(enumerate(cidx)) if r[0] == "root" else cidx
        for a, k in free.items():
            z[..., k] = self._n(lo[a], a)
            z[..., sidx[a]] = self._n(hi[a], a)
        if r[0] == "free":
            conn = r[1]
            a = conn.axis
            z[..., sidx[a]] = self._n(hi[a] if conn.side > 0 else lo[a], a)

    def polish_directions(self) -> np.ndarray:
        """Unit coordinate moves plus, per face pair, a joint shift and a symmetric resize.

        Mirrored parts hang off their parent's center, so moving one parent
        face drags them along; the paired moves let the polish step past that.
        """
        n = self.codec.dim
        dirs = [np.eye(n)]
        for lo, hi in self.face_pairs():
            shift = np.zeros(n)
            shift[[lo, hi]] = 1.0
            grow = np.zeros(n)
            grow[lo], grow[hi] = -1.0, 1.0
            dirs.append(np.stack([shift, grow]))
        return np.vstack(dirs)

    def to_params(self, z) -> np.ndarray:
        codec = self.codec
        z = np.asarray(z, dtype=float)
        p = np.empty_like(z)
        C = np.empty(z.shape[:-1] + (codec.n_boxes, 3))
        S = np.empty_like(C)
        for i in codec.order:
            r = codec.role[i]
            cidx, sidx = codec.slots[i]
            if r[0] == "mirror":
                conn, rep = r[1], r[2]
                S[..., i, :] = S[..., rep, :]
                C[..., i, :] = C[..., rep, :]
                for a in r[3]:
                    C[..., i, a] = 2 * C[..., conn.parent, a] - C[..., rep, a]
                continue
            free = dict(enumerate(cidx)) if r[0] == "root" else cidx
            for a, k in free.items():
                lo = self._a(z[..., k], a)
                hi = self._a(z[..., sidx[a]], a)
                p[..., k] = 0.5 * (lo + hi)
                # crossed faces reflect instead of clamping, so no region is flat
                p[..., sidx[a]] = np.abs(hi - lo)
                C[..., i, a] = p[..., k]
                S[..., i, a] = p[..., sidx[a]]
            if r[0] == "free":
                conn = r[1]
                a = conn.axis
                face = C[..., conn.parent, a] + conn.side * 0.5 * S[..., conn.parent, a]
                length = np.abs(self._a(z[..., sidx[a]], a) - face)
                p[..., sidx[a]] = length
                S[..., i, a] = length
                C[..., i, a] = face + conn.side * 0.5 * S[..., i, a]
        return p


def compass_search(f, z0, step: float = 0.01, tol: float = 1e-9, max_evals: int = 20000,
                   directions: Optional[np.ndarray] = None):
    """Pattern search along fixed directions with per-direction step doubling/halving.

    ``f`` maps a (k, n) batch to k values; ``directions`` defaults to the
    coordinate axes.  Used to polish CMA-ES output: the energy is piecewise
    smooth with sharp kinks at the optimum, where single-face moves converge
    far faster than the adapted covariance.
    Returns (z, f(z), evaluations, evaluation count at the last improvement).
    """
    z = np.array(z0, dtype=float)
    D = np.eye(z.size) if directions is None else np.asarray(directions, dtype=float)
    fz = float(f(z[None])[0])
    steps = np.full(len(D), float(step))
    evals = 1
    last_gain = 0
    while evals < max_evals:
        active = np.flatnonzero(steps > tol)
        if active.size == 0:
            break
        for k in active:
            cand = np.stack([z + steps[k] * D[k], z - steps[k] * D[k]])
            fc = f(cand)
            evals += 2
            j = int(np.argmin(fc))
            if fc[j] < fz:
                z, fz = cand[j], float(fc[j])
                steps[k] *= 2.0
                last_gain = evals
            else:
                steps[k] *= 0.5
    return z, fz, evals, last_gain


def _run(points, t, space, bbox_vol, weights, z0, cma, polish_evals):
    lam_w = weights.as_array()

    def objective(Z):
        c, s = t.codec.decode_batch(space.to_params(Z))
        return batch_energy_terms(points, c, s, bbox_vol) @ lam_w

    res = minimize(objective, z0, cma, vectorized=True)
    if polish_evals > 0:
        z, fz, ev, gain_at = compass_search(objective, res.best_x, max_evals=polish_evals,
                                            directions=space.polish_directions())
        if fz < res.best_f:
            res.best_x, res.best_f = z, fz
            res.best_evaluation = res.evaluations + gain_at
        res.evaluations += ev
    return res


def refit_boxes(points, t: Template, space: SearchSpace, z, rounds: int = 3,
                min_points: int = 8) -> np.ndarray:
    """Alternate nearest-box assignment and per-box bounding boxes of the assigned points."""
    z = np.array(z, dtype=float)
    for _ in range(rounds):
        c, s = t.codec.decode_batch(space.to_params(z))
        d = points_to_boxes_distance(points, c, s)
        lab = np.argmin(d, axis=1)
        for i in range(t.n_boxes):
            if t.codec.role[i][0] == "mirror":
                continue
            q = points[lab == i]
            if len(q) >= min_points:
                space.set_faces(z, i, q.min(axis=0), q.max(axis=0))
    return z


def _repair_collapsed(res, points, t, space, bbox_vol, config, rel: float = 0.05):
    """Re-seed parts that shrank to almost nothing, with the face they rest on.

    A part swallowed by its neighbour has no energy pulling it back, and
    regrowing it means moving several faces at once.  Each collapsed part is
    reset to the default start, refitted to the points and re-optimized;
    improvements are kept.
    """
    rest_z = space.to_z(default_init(points, t))
    _, rest_s = t.codec.decode_batch(space.to_params(rest_z))
    cma = replace(config.cma, max_evals=config.repair_evals, seed=config.cma.seed + 104729)
    for i in range(t.n_boxes):
        _, s = t.codec.decode_batch(space.to_params(res.best_x))
        if np.all(s[i] >= rel * rest_s[i]):
            continue
        idx = space.part_coordinates(i)
        if not idx:
            continue
        z0 = res.best_x.copy()
        z0[idx] = rest_z[idx]
        z0 = refit_boxes(points, t, space, z0, max(config.refine_init, 1))
        r = _run(points, t, space, bbox_vol, config.weights, z0, cma, config.repair_evals // 2)
        res.evaluations += r.evaluations
        if r.best_f < res.best_f:
            res.best_x, res.best_f = r.best_x, r.best_f


def fit_template(cloud, t: Template, inits: Sequence = (), config: FitConfig = FitConfig(),
                 prepared: Optional[np.ndarray] = None) -> FitResult:
    """Best of several CMA-ES runs: one per supplied init, then default starts.

    Default starts fill up to ``config.restarts`` runs; the first is the plain
    default layout, later ones are jittered copies.  Run ``r`` uses seed
    ``config.cma.seed + r``.
    """
    if config.restarts < 1:
        raise NoRestarts("restarts must be >= 1")
    points = prepared if prepared is not None else prepare_cloud(cloud, config)
    space = SearchSpace(t, points)
    bbox_vol = bounding_box(points).volume
    starts = []
    for init in inits:
        if not isinstance(init, Init):
            init = Init(np.asarray(init, dtype=float))
        t.codec.check_length(init.params)
        starts.append((space.to_z(init.params), init.source))
    n_default = max(config.restarts - len(starts), 0)
    for k in range(n_default):
        if k == 0:
            z0 = space.to_z(default_init(points, t))
        else:
            rng = np.random.default_rng([config.cma.seed, 7919, k])
            z0 = space.to_z(default_init(points, t, config.init_size_spread, rng))
            z0 = z0 + rng.normal(0.0, config.init_jitter, size=z0.shape)
        # alternate plain and data-refitted starts; each fails on different shapes
        if config.refine_init > 0 and k % 2 == 1:
            z0 = refit_boxes(points, t, space, z0, config.refine_init)
        starts.append((z0, "default"))

    def one(r):
        z0, _ = starts[r]
        return _run(points, t, space, bbox_vol, config.weights, z0,
                    replace(config.cma, seed=config.cma.seed + r), config.polish_evals)

    if config.threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(config.threads) as ex:
            runs = list(ex.map(one, range(len(starts))))
    else:
        runs = [one(r) for r in range(len(starts))]

    best = min(range(len(runs)), key=lambda r: (runs[r].best_f, r))
    if config.repair_evals > 0:
        _repair_collapsed(runs[best], points, t, space, bbox_vol, config)
    params = space.to_params(runs[best].best_x)
    c, s = t.codec.decode_batch(params)
    terms = batch_energy_terms(points, c, s, bbox_vol)[0]
    return FitResult(
        template_id=t.template_id,
        params=params,
        boxes=boxes_from_arrays(c, s),
        breakdown=EnergyBreakdown.combine(terms, config.weights),
        evaluations=sum(r.evaluations for r in runs),
        init_source=starts[best][1],
        run_energies=[r.best_f for r in runs],
        evaluations_to_best=runs[best].best_evaluation,
    )


def select_template(cloud, candidates: Sequence[Template], config: FitConfig = FitConfig(),
                    inits: Optional[dict] = None, tie_rtol: float = TIE_RTOL):
    """Fit every candidate; return (best, results with best first, the rest ascending by energy).

    Energies within ``tie_rtol`` (relative, at least 1e-12 absolute) of the
    lowest tie; ties go to the template with fewer boxes, then to the earlier
    candidate.  A template that contains another (a chair whose backrest can
    shrink to nothing contains a table) reaches the same optimum, so the gap
    between them is optimizer noise rather than evidence.
    """
    candidates = list(candidates)
    if not candidates:
        raise NoCandidates("select_template needs at least one candidate template")
    inits = inits or {}
    points = prepare_cloud(cloud, config)
    results = [fit_template(points, t, inits.get(t.template_id, ()), config, prepared=points)
               for t in candidates]
    nboxes = {t.template_id: t.n_boxes for t in candidates}
    order = sorted(range(len(results)), key=lambda k: (results[k].e_total, k))
    # resolve near-ties toward the simpler template
    ranked = [results[k] for k in order]
    best = ranked[0]
    tol = max(1e-12, tie_rtol * abs(best.e_total))
    for r in ranked[1:]:
        if r.e_total - ranked[0].e_total > tol:
            break
        if nboxes[r.template_id] < nboxes[best.template_id]:
            best = r
    if best is not ranked[0]:
        ranked.remove(best)
        ranked.insert(0, best)
    return best, ranked
