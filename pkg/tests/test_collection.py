import itertools
import json
from dataclasses import replace

import numpy as np
import pytest

import boxtemplates.fitting as fitting
from boxtemplates.collection import (ClusterModel, CollectionIndex, ShapeRecord, assign_cluster,
                                     kmeans, load_index, preprocess_collection,
                                     retrieve_nearest, save_index)
from boxtemplates.energy import breakdown
from boxtemplates.errors import (DimensionMismatch, EmptyClusters, EmptyInput, InputError,
                                 TemplateMismatch, UnknownFamily, UnknownTemplate)
from boxtemplates.fitting import DEFAULT_CMA, FitConfig, farthest_point_sample
from boxtemplates.geometry import as_points
from boxtemplates.io import geometry_points
from boxtemplates.synthetic import make_collection, make_shape

QUICK = FitConfig(restarts=2, cma=replace(DEFAULT_CMA, max_evals=1500), polish_evals=1000,
                  sample_count=512)


def test_kmeans_k1_is_mean():
    X = np.random.default_rng(0).normal(size=(30, 4))
    C, a, inertia = kmeans(X, 1)
    assert np.allclose(C[0], X.mean(axis=0), atol=1e-12)
    assert np.all(a == 0)
    assert inertia == pytest.approx(((X - X.mean(0)) ** 2).sum())


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(0, 0.1, (25, 2)), rng.normal(10, 0.1, (25, 2))])
    for seed in range(5):
        _, a, _ = kmeans(X, 2, seed=seed)
        assert len(set(a[:25])) == 1 and len(set(a[25:])) == 1 and a[0] != a[-1]


def test_kmeans_inertia_non_increasing_and_deterministic():
    X = np.random.default_rng(2).normal(size=(200, 3))
    seen = []
    C, a, _ = kmeans(X, 6, seed=3, callback=lambda it, v: seen.append(v))
    assert all(x >= y - 1e-9 for x, y in zip(seen, seen[1:]))
    C2, a2, _ = kmeans(X, 6, seed=3)
    assert np.array_equal(C, C2) and np.array_equal(a, a2)


def test_kmeans_permutation_matches_up_to_relabeling():
    X = np.random.default_rng(4).normal(size=(60, 2))
    C, a, _ = kmeans(X, 3, seed=0)
    perm = np.random.default_rng(5).permutation(60)
    C2, a2, _ = kmeans(X[perm], 3, init=C)
    relabel = {int(x): int(y) for x, y in zip(a[perm], a2)}
    assert len(relabel) == 3
    assert np.allclose(C2[[relabel[j] for j in range(3)]], C, atol=1e-12)


def test_kmeans_errors_and_reduction():
    with pytest.raises(EmptyInput):
        kmeans([], 2)
    with pytest.raises(DimensionMismatch):
        kmeans([[1, 2], [1, 2, 3]], 1)
    with pytest.warns(UserWarning):
        C, a, _ = kmeans([[0.0], [1.0]], 5)
    assert len(C) == 2 and sorted(a) == [0, 1]


def small_index():
    """Hand-built index: template 2 with two clusters, template 4 with one."""
    recs, clouds = [], {}
    params = {"a": [0.0, 0.0], "b": [1.0, 0.0], "c": [4.0, 4.0], "d": [5.0, 4.0], "e": [9.0]}
    cluster = {"a": 0, "b": 0, "c": 1, "d": 1, "e": 2}
    for sid, p in params.items():
        fit = fitting.FitResult(2 if len(p) == 2 else 4, np.array(p), [], None, 0)
        recs.append(ShapeRecord(sid, "x", fit=fit, cluster=cluster[sid]))
    model = ClusterModel(2, {2: np.array([[0.5, 0.0], [4.5, 4.0]]), 4: np.array([[9.0]])},
                         {2: [["a", "b"], ["c", "d"]], 4: [["e"]]})
    return CollectionIndex(recs, model, {}, [2, 2, 4], [0, 1, 0], clouds=clouds)


def test_assign_cluster_examples():
    idx = small_index()
    assert assign_cluster(idx, 2, [0.5, 0.0]) == 0
    assert assign_cluster(idx, 2, [4.5, 4.0]) == 1
    assert assign_cluster(idx, 4, [100.0]) == 2
    # equidistant from both centroids
    assert assign_cluster(idx, 2, [2.5, 2.0]) == 0
    with pytest.raises(UnknownTemplate):
        assign_cluster(idx, 7, [0.0])
    with pytest.raises(DimensionMismatch):
        assign_cluster(idx, 2, [0.0])
    rng = np.random.default_rng(6)
    for q in rng.normal(2, 3, size=(100, 2)):
        C = idx.cluster_model.centroids[2]
        brute = min(range(2), key=lambda j: (sum((C[j] - q) ** 2), j))
        assert assign_cluster(idx, 2, q) == brute


def test_retrieve_nearest_examples():
    idx = small_index()
    assert retrieve_nearest(idx, [0, 1], [4.0, 4.0])[0] == "c"
    q = np.array([3.0, 1.0])
    brute = sorted(["a", "b", "c", "d"],
                   key=lambda s: sum((idx.record(s).fit.params - q) ** 2))
    assert retrieve_nearest(idx, [0, 1], q) == brute
    assert retrieve_nearest(idx, [1], q) == ["c", "d"]
    with pytest.raises(EmptyClusters):
        retrieve_nearest(idx, [], q)
    with pytest.raises(TemplateMismatch):
        retrieve_nearest(idx, [0, 2], q)
    with pytest.raises(TemplateMismatch):
        retrieve_nearest(idx, [0], q, template_id=4)
    with pytest.raises(InputError):
        retrieve_nearest(idx, [9], q)


def test_unknown_family_and_empty(library):
    with pytest.raises(UnknownFamily):
        preprocess_collection([("s", "spaceship", np.zeros((3, 3)))], library, QUICK)
    idx = preprocess_collection([], library, QUICK)
    assert idx.records == [] and idx.n_clusters == 0


def test_warm_start_chain(by_name, library, monkeypatch):
    """The second copy of a shape reaches the first copy's energy no later."""
    t = by_name["table"]
    shape = make_shape(t, np.random.default_rng(7))
    config = replace(QUICK, restarts=1)
    totals = []
    real = fitting.batch_energy_terms

    def counting(points, c, s, vol):
        terms = real(points, c, s, vol)
        totals.extend((terms @ config.weights.as_array()).tolist())
        return terms

    monkeypatch.setattr(fitting, "batch_energy_terms", counting)
    marks = []
    idx = preprocess_collection([("a", "table", shape.cloud), ("b", "table", shape.cloud)],
                                library, config, clusters_per_template=1,
                                progress=lambda n, total, rec: marks.append(len(totals)))
    first, second = idx.records
    assert second.fit.init_source == "warm_start"
    target = first.fit.e_total + 1e-9

    def evals_to(seq):
        return next(i + 1 for i, v in enumerate(seq) if v <= target)

    n_first = evals_to(totals[:marks[0]])
    n_second = evals_to(totals[marks[0]:marks[1]])
    assert second.fit.e_total <= target
    assert n_second <= n_first


def test_two_template_collection(library, by_name):
    rng = np.random.default_rng(8)
    gens = [by_name["chair_4leg"], by_name["chair_swivel"]]
    shapes = make_collection(gens, 20, rng, n_points=1024)
    # the default four starts; two cheap starts sit right at the 90% line
    idx = preprocess_collection([(s.shape_id, "chair", s.cloud) for s in shapes], library,
                                replace(QUICK, restarts=4), clusters_per_template=3)
    hits = sum(r.fit.template_id == s.template_id for r, s in zip(idx.records, shapes))
    assert hits >= 0.9 * len(shapes)
    # every shape sits in exactly one cluster, and the maps agree
    members = list(itertools.chain.from_iterable(idx.cluster_members(c)
                                                 for c in range(idx.n_clusters)))
    assert sorted(members) == sorted(s.shape_id for s in shapes)
    for r in idx.records:
        assert idx.cluster_template[r.cluster] == r.fit.template_id
        assert r.shape_id in idx.cluster_members(r.cluster)
    for c in range(idx.n_clusters):
        tid = idx.cluster_template[c]
        assert len(idx.centroid(c)) == idx.templates[tid].codec.dim
        assert assign_cluster(idx, tid, idx.centroid(c)) == c
    assert idx.n_clusters <= 2 * 3


def test_save_load_round_trip(library, by_name, tmp_path):
    rng = np.random.default_rng(9)
    shapes = [make_shape(by_name["mug"], rng, n_points=600, shape_id=f"mug/{k}") for k in range(3)]
    idx = preprocess_collection([(s.shape_id, "cup", s.cloud) for s in shapes], library,
                                QUICK, clusters_per_template=2)
    save_index(idx, tmp_path / "idx")
    assert json.loads((tmp_path / "idx" / "manifest.json").read_text())["format"]
    back = load_index(tmp_path / "idx")
    assert back.cluster_template == idx.cluster_template
    for c in range(idx.n_clusters):
        assert np.array_equal(back.centroid(c), idx.centroid(c))
        assert back.cluster_members(c) == idx.cluster_members(c)
    for r, s in zip(back.records, shapes):
        orig = idx.record(r.shape_id)
        assert np.array_equal(r.fit.params, orig.fit.params) and r.cluster == orig.cluster
        # stored fit re-evaluates to the stored breakdown from the stored geometry
        pts = farthest_point_sample(as_points(geometry_points(back.geometry(r.shape_id))),
                                    QUICK.sample_count, QUICK.cma.seed)
        again = breakdown(pts, r.fit.boxes)
        assert np.allclose(again.terms(), r.fit.breakdown.terms(), rtol=0, atol=1e-9)
        assert retrieve_nearest(back, [r.cluster], r.fit.params)[0] == r.shape_id


def test_load_missing_index(tmp_path):
    with pytest.raises(InputError, match="manifest"):
        load_index(tmp_path)
