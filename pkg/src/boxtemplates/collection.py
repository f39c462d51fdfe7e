"""Structural index over a shape collection.

Every shape is fitted with the templates of its family; shapes are grouped by
their best template and clustered by k-means over the raw parameter vectors.
The index answers two queries: nearest cluster for a parameter vector, and
nearest indexed shapes within a set of clusters.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import yaml

from .errors import (BoxTemplateError, DimensionMismatch, EmptyClusters, EmptyInput,
                     InputError, ParseError, TemplateMismatch, UnknownFamily,
                     UnknownTemplate)
from .fitting import FitConfig, FitResult, Init, select_template
from .geometry import as_points
from .io import Mesh, atomic_write, format_obj, format_xyz, geometry_points, load_geometry
from .template import parse_template_library, template_to_dict, templates_by_family

INDEX_FORMAT = "boxtemplates-index/1"
DEFAULT_CLUSTERS = 10


@dataclass
class ShapeRecord:
    shape_id: str
    family: str
    cloud_path: Optional[str] = None
    fit: Optional[FitResult] = None
    error: Optional[str] = None  # set when the shape is quarantined
    cluster: int = -1


@dataclass
class ClusterModel:
    clusters_per_template: int = DEFAULT_CLUSTERS
    centroids: dict = field(default_factory=dict)  # template id -> (k, dim)
    members: dict = field(default_factory=dict)    # template id -> list of shape id lists


@dataclass
class CollectionIndex:
    records: list
    cluster_model: ClusterModel
    templates: dict  # template id -> Template
    cluster_template: list = field(default_factory=list)  # global id -> template id
    cluster_local: list = field(default_factory=list)     # global id -> index within template
    root: Optional[Path] = None  # directory the index was loaded from
    clouds: dict = field(default_factory=dict, repr=False)  # in-memory geometry by shape id

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_template)

    def record(self, shape_id: str) -> ShapeRecord:
        for r in self.records:
            if r.shape_id == shape_id:
                return r
        raise InputError(f"shape {shape_id!r} is not in the index")

    def centroid(self, cluster_id: int) -> np.ndarray:
        tid = self.cluster_template[cluster_id]
        return self.cluster_model.centroids[tid][self.cluster_local[cluster_id]]

    def cluster_members(self, cluster_id: int) -> list:
        tid = self.cluster_template[cluster_id]
        return self.cluster_model.members[tid][self.cluster_local[cluster_id]]

    def clusters_of(self, template_id: int) -> list:
        return [c for c, t in enumerate(self.cluster_template) if t == template_id]

    def geometry(self, shape_id: str):
        """The stored source geometry of an indexed shape (cloud or mesh)."""
        if shape_id in self.clouds:
            return self.clouds[shape_id]
        rec = self.record(shape_id)
        if rec.cloud_path is None:
            raise InputError(f"no geometry stored for shape {shape_id!r}")
        path = Path(rec.cloud_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return load_geometry(path)


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 100, init=None,
           callback: Optional[Callable[[int, float], None]] = None):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centroids, assignments, inertia).  ``k`` larger than the number
    of vectors is reduced with a warning.  ``init`` supplies explicit starting
    centroids instead of k-means++; ``callback(iteration, inertia)`` sees the
    inertia after every assignment step.  An emptied cluster keeps its
    previous centroid.
    """
    if len(vectors) == 0:
        raise EmptyInput("kmeans needs at least one vector")
    dims = {len(np.ravel(v)) for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatch(f"vectors have differing dimensions {sorted(dims)}")
    X = np.array([np.ravel(v) for v in vectors], dtype=float)
    n = len(X)
    if init is not None:
        C = np.array(init, dtype=float).reshape(-1, X.shape[1])
        k = len(C)
    else:
        if k < 1:
            raise InputError(f"k must be >= 1, got {k}")
        if k > n:
            warnings.warn(f"k={k} exceeds the {n} vectors; using k={n}", stacklevel=2)
            k = n
        C = _kmeanspp(X, k, np.random.default_rng(seed))
    assign = None
    inertia = np.inf
    for it in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new].sum())
        if callback is not None:
            callback(it, inertia)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            m = assign == j
            if m.any():
                C[j] = X[m].mean(axis=0)
    return C, assign, inertia


def _kmeanspp(X, k, rng) -> np.ndarray:
    n = len(X)
    C = np.empty((k, X.shape[1]))
    C[0] = X[rng.integers(n)]
    d2 = ((X - C[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        C[j] = X[idx]
        np.minimum(d2, ((X - C[j]) ** 2).sum(axis=1), out=d2)
    return C


def _shape_tuple(s):
    if len(s) == 3:
        sid, fam, geom = s
        path = None
    else:
        sid, fam, geom, path = s[:4]
    return str(sid), str(fam), geom, path


def preprocess_collection(shapes: Sequence, library, config: FitConfig = FitConfig(),
                          clusters_per_template: int = DEFAULT_CLUSTERS, seed: int = 0,
                          warm_starts: int = 1, progress=None) -> CollectionIndex:
    """Fit, group and cluster a collection.

    ``shapes`` holds (id, family, cloud) or (id, family, cloud, path) tuples.
    Each shape is fitted against its family's templates; the last
    ``warm_starts`` successful same-family fits of a template (in input
    order) seed extra CMA-ES starts for that template.  Shapes whose fit
    raises are kept with an error note and no cluster.
    """
    templates = {t.template_id: t for t in library}
    fam = templates_by_family(library)
    entries = [_shape_tuple(s) for s in shapes]
    for sid, f, _, _ in entries:
        if f not in fam:
            raise UnknownFamily(f"family {f!r} of shape {sid!r} has no template in the library")
    records, clouds = [], {}
    history: dict = {}  # (family, template id) -> prior best params
    for n, (sid, f, geom, path) in enumerate(entries):
        pts = as_points(geometry_points(geom))
        clouds[sid] = geom
        rec = ShapeRecord(sid, f, None if path is None else str(path))
        inits = {t.template_id: [Init(p, "warm_start") for p in history.get((f, t.template_id), [])]
                 for t in fam[f]}
        try:
            best, _ = select_template(pts, fam[f], config, inits)
            if not np.isfinite(best.e_total):
                raise BoxTemplateError("non-finite fitting energy")
            rec.fit = best
            if warm_starts > 0:
                prior = history.setdefault((f, best.template_id), [])
                prior.append(best.params)
                del prior[:max(len(prior) - warm_starts, 0)]
        except BoxTemplateError as exc:
            rec.error = f"{type(exc).__name__}: {exc}"
        records.append(rec)
        if progress is not None:
            progress(n + 1, len(entries), rec)
    index = CollectionIndex(records, ClusterModel(clusters_per_template), templates,
                            clouds=clouds)
    _cluster(index, seed)
    return index


def _cluster(index: CollectionIndex, seed: int) -> None:
    model = index.cluster_model
    model.centroids, model.members = {}, {}
    index.cluster_template, index.cluster_local = [], []
    by_t: dict = {}
    for r in index.records:
        r.cluster = -1
        if r.fit is not None:
            by_t.setdefault(r.fit.template_id, []).append(r)
    for tid in sorted(by_t):
        recs = by_t[tid]
        k = min(model.clusters_per_template, len(recs))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            C, assign, _ = kmeans([r.fit.params for r in recs], k, seed=seed + tid)
        base = len(index.cluster_template)
        model.centroids[tid] = C
        model.members[tid] = [[] for _ in range(len(C))]
        for j in range(len(C)):
            index.cluster_template.append(tid)
            index.cluster_local.append(j)
        for r, a in zip(recs, assign):
            r.cluster = base + int(a)
            model.members[tid][int(a)].append(r.shape_id)


def assign_cluster(index: CollectionIndex, template_id: int, params) -> int:
    """Nearest centroid among the template's clusters; ties go to the lower id."""
    ids = index.clusters_of(template_id)
    if not ids:
        raise UnknownTemplate(f"template {template_id} has no clusters in the index")
    C = index.cluster_model.centroids[template_id]
    p = np.asarray(params, dtype=float).reshape(-1)
    if p.size != C.shape[1]:
        raise DimensionMismatch(f"template {template_id} expects {C.shape[1]} params, got {p.size}")
    d2 = ((C - p) ** 2).sum(axis=1)
    return ids[int(np.argmin(d2))]


def retrieve_nearest(index: CollectionIndex, cluster_ids: Sequence[int], query_params,
                     template_id: Optional[int] = None) -> list:
    """Shape ids from the given clusters ranked by parameter distance to the query.

    Equal distances keep index order.
    """
    cluster_ids = list(cluster_ids)
    if not cluster_ids:
        raise EmptyClusters("retrieve_nearest needs at least one cluster")
    for c in cluster_ids:
        if not 0 <= c < index.n_clusters:
            raise InputError(f"unknown cluster id {c}")
    tids = {index.cluster_template[c] for c in cluster_ids}
    if len(tids) != 1 or (template_id is not None and tids != {template_id}):
        raise TemplateMismatch(f"clusters {cluster_ids} do not share one template"
                               + ("" if template_id is None else f" ({template_id})"))
    q = np.asarray(query_params, dtype=float).reshape(-1)
    wanted = set(cluster_ids)
    cands = [r for r in index.records if r.cluster in wanted]
    if cands and q.size != cands[0].fit.params.size:
        raise TemplateMismatch(f"query has {q.size} params, template expects "
                               f"{cands[0].fit.params.size}")
    d = [float(np.sum((r.fit.params - q) ** 2)) for r in cands]
    order = sorted(range(len(cands)), key=lambda i: (d[i], i))
    return [cands[i].shape_id for i in order]


# persistence

def _safe_name(shape_id: str) -> str:
    keep = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in shape_id)
    return keep or "shape"


def save_index(index: CollectionIndex, directory) -> Path:
    """Write the manifest, one fit document per shape, and any in-memory clouds."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    used = set()
    recs = []
    for r in index.records:
        name = _safe_name(r.shape_id)
        while name in used:
            name += "_"
        used.add(name)
        d = {"shape_id": r.shape_id, "family": r.family, "cluster": r.cluster,
             "error": r.error, "fit_file": None, "cloud_path": r.cloud_path}
        if r.fit is not None:
            d["fit_file"] = f"fits/{name}.json"
            atomic_write(root / d["fit_file"], r.fit.dumps())
        if r.cloud_path is None and r.shape_id in index.clouds:
            g = index.clouds[r.shape_id]
            if isinstance(g, Mesh):
                d["cloud_path"] = f"clouds/{name}.obj"
                atomic_write(root / d["cloud_path"], format_obj(g))
            else:
                d["cloud_path"] = f"clouds/{name}.xyz"
                atomic_write(root / d["cloud_path"], format_xyz(as_points(g)))
        elif r.cloud_path is not None:
            d["cloud_path"] = str(Path(r.cloud_path).resolve())
        recs.append(d)
    model = index.cluster_model
    manifest = {
        "format": INDEX_FORMAT,
        "clusters_per_template": model.clusters_per_template,
        "templates": [template_to_dict(index.templates[t]) for t in sorted(index.templates)],
        "records": recs,
        "clusters": [{"id": c, "template_id": index.cluster_template[c],
                      "centroid": [float(v) for v in index.centroid(c)],
                      "members": index.cluster_members(c)}
                     for c in range(index.n_clusters)],
    }
    atomic_write(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_index(directory) -> CollectionIndex:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise InputError(f"no collection index at {root} (missing manifest.json); "
                         "build one with 'boxtemplates index build'")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed index manifest: {exc.msg}", line=exc.lineno) from None
    if not isinstance(m, dict) or m.get("format") != INDEX_FORMAT:
        got = m.get("format") if isinstance(m, dict) else None
        raise ParseError(f"unsupported index format {got!r}", field="format")
    try:
        return _index_from_manifest(m, root)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed index manifest: missing or bad field {exc}") from None
    except OSError as exc:
        raise InputError(f"cannot read index file: {exc}") from None


def _index_from_manifest(m: dict, root: Path) -> CollectionIndex:
    lib = parse_template_library(yaml.safe_dump(
        {"format": "boxtemplates-library/1", "templates": m["templates"]}))
    templates = {t.template_id: t for t in lib}
    records = []
    for d in m["records"]:
        fit = None
        if d.get("fit_file"):
            fit = FitResult.loads((root / d["fit_file"]).read_text())
        records.append(ShapeRecord(d["shape_id"], d["family"], d.get("cloud_path"), fit,
                                   d.get("error"), int(d.get("cluster", -1))))
    model = ClusterModel(int(m["clusters_per_template"]))
    index = CollectionIndex(records, model, templates, root=root)
    for c in sorted(m["clusters"], key=lambda c: c["id"]):
        tid = int(c["template_id"])
        model.centroids.setdefault(tid, [])
        model.members.setdefault(tid, [])
        index.cluster_template.append(tid)
        index.cluster_local.append(len(model.centroids[tid]))
        model.centroids[tid].append(c["centroid"])
        model.members[tid].append(list(c["members"]))
    model.centroids = {t: np.array(v, dtype=float) for t, v in model.centroids.items()}
    return index


def index_library(index: CollectionIndex) -> list:
    return [index.templates[t] for t in sorted(index.templates)]

