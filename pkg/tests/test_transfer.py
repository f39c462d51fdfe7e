import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from boxtemplates.classify import TrainConfig, cloud_features, train
from boxtemplates.collection import preprocess_collection
from boxtemplates.errors import (BoxCountMismatch, DegenerateSourceBox, DimensionMismatch,
                                 EmptyTemplate)
from boxtemplates.fitting import DEFAULT_CMA, FitConfig
from boxtemplates.geometry import AABox, bounding_box, stack_boxes, template_bounding_box
from boxtemplates.io import Mesh
from boxtemplates.scansim import occlude_half
from boxtemplates.synthetic import make_shape
from boxtemplates.transfer import (box_affine_map, deform, deform_mesh, identify_partial,
                                   label_points, recover_shape, scan_residual)

UNIT = AABox((0, 0, 0), (1, 1, 1))
QUICK = FitConfig(restarts=2, cma=replace(DEFAULT_CMA, max_evals=1500), polish_evals=1500,
                  sample_count=512)


def random_box(rng, lo=0.2):
    return AABox(tuple(rng.uniform(-2, 2, 3)), tuple(rng.uniform(lo, 2, 3)))


def test_affine_map_examples():
    assert np.array_equal(box_affine_map(UNIT, AABox((1, 0, 0), (2, 1, 1)), (0.5, 0, 0)),
                          [2, 0, 0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        b1, b2 = random_box(rng), random_box(rng)
        p = rng.normal(size=3)
        assert np.allclose(box_affine_map(b1, b1, p), p, atol=1e-15)
        got = [box_affine_map(b1, b2, q) for q in oracles.box_corners(b1.center, b1.size)]
        assert np.allclose(got, oracles.box_corners(b2.center, b2.size), atol=1e-12)


def test_affine_map_composition():
    rng = np.random.default_rng(1)
    # dyadic centers and power-of-two sizes keep the diagonal algebra exact
    def dy():
        return tuple(rng.integers(-16, 16, 3) / 8)

    def pow2():
        return tuple(2.0 ** rng.integers(-3, 4, 3))
    for _ in range(50):
        b1, b2, b3 = (AABox(dy(), pow2()) for _ in range(3))
        p = dy()
        two = box_affine_map(b2, b3, box_affine_map(b1, b2, p))
        assert np.array_equal(two, box_affine_map(b1, b3, p))


def test_degenerate_source_box_warns():
    with pytest.warns(DegenerateSourceBox):
        q = box_affine_map(AABox((0, 0, 0), (0, 1, 1)), AABox((1, 0, 0), (2, 2, 2)), (0.0, 0.5, 0))
    assert np.allclose(q, [1, 1, 0])


def test_identity_deform(by_name):
    shape = make_shape(by_name["chair_4leg"], np.random.default_rng(2))
    c, s = stack_boxes(shape.boxes)
    # points spanning the boxes' bounding box, so the global rescale is the identity too
    pts = np.vstack([shape.cloud.points] + [oracles.box_corners(ci, si) for ci, si in zip(c, s)])
    out = deform(pts, shape.boxes, shape.boxes)
    assert np.max(np.abs(out - pts)) <= 1e-12
    assert np.max(np.abs(deform(pts, shape.boxes, shape.boxes, global_scaling=False) - pts)) <= 1e-12


def test_dominant_weight_corners():
    rng = np.random.default_rng(3)
    for _ in range(10):
        # two boxes far apart: each box's points see weight ~exp(-100) from the other
        src = [AABox((-6, 0, 0), tuple(rng.uniform(0.5, 2, 3))),
               AABox((6, 0, 0), tuple(rng.uniform(0.5, 2, 3)))]
        tgt = [AABox((-6 + rng.uniform(-.5, .5), 0, 0), tuple(rng.uniform(0.5, 2, 3))),
               AABox((6 + rng.uniform(-.5, .5), 0, 0), tuple(rng.uniform(0.5, 2, 3)))]
        corners = np.array([q for b in src for q in oracles.box_corners(b.center, b.size)])
        want = np.array([q for b in tgt for q in oracles.box_corners(b.center, b.size)])
        assert np.max(np.abs(deform(corners, src, tgt) - want)) <= 1e-3
        inner = np.array([src[0].center]) + 0.1
        assert np.allclose(deform(inner, src, tgt, global_scaling=False),
                           [box_affine_map(src[0], tgt[0], inner[0])], atol=1e-3)


def test_deformed_bbox_equals_target_bbox(by_name):
    rng = np.random.default_rng(4)
    t = by_name["table"]
    for _ in range(5):
        a, b = make_shape(t, rng), make_shape(t, rng)
        out = deform(a.cloud.points, a.boxes, b.boxes)
        bb, tb = bounding_box(out), template_bounding_box(b.boxes)
        assert np.allclose(bb.lo, tb.lo, atol=1e-6) and np.allclose(bb.hi, tb.hi, atol=1e-6)


def test_deform_is_continuous():
    rng = np.random.default_rng(5)
    src = [random_box(rng) for _ in range(3)]
    tgt = [random_box(rng) for _ in range(3)]
    line = np.linspace(-3, 3, 20001)[:, None] * np.array([[1.0, 0.7, -0.4]])
    out = deform(line, src, tgt, global_scaling=False)
    step = np.linalg.norm(line[1] - line[0])
    assert np.max(np.linalg.norm(np.diff(out, axis=0), axis=1)) < 50 * step


def test_deform_errors():
    with pytest.raises(BoxCountMismatch):
        deform(np.zeros((1, 3)), [UNIT], [UNIT, UNIT])
    with pytest.raises(EmptyTemplate):
        deform(np.zeros((1, 3)), [], [])


def test_deform_mesh_keeps_connectivity():
    v = np.array(oracles.box_corners((0, 0, 0), (1, 1, 1)), dtype=float)
    faces = np.array([[0, 1, 2], [1, 3, 2], [4, 5, 6]])
    m = deform_mesh(Mesh(v, faces), [UNIT], [AABox((1, 1, 1), (2, 3, 4))])
    assert m.vertices.shape == v.shape and np.array_equal(m.faces, faces)
    assert np.allclose(bounding_box(m.vertices).size, (2, 3, 4))


def test_label_points_examples():
    boxes = [UNIT, AABox((3, 0, 0), (1, 1, 1))]
    lab = label_points(np.array([[0.1, 0, 0], [3.2, 0, 0], [1.5, 0, 0], [9, 9, 9]]), boxes)
    assert lab.labels.tolist() == [0, 1, 0, 1]
    with pytest.raises(EmptyTemplate):
        label_points(np.zeros((1, 3)), [])


def iou(a, b, k):
    inter = np.sum((a == k) & (b == k))
    union = np.sum((a == k) | (b == k))
    return inter / union if union else 1.0


def test_label_iou_on_clean_shapes(library):
    rng = np.random.default_rng(6)
    for t in library:
        shape = make_shape(t, rng)
        lab = label_points(shape.cloud, shape.boxes, t)
        assert lab.label_names == t.node_names
        for k in range(t.n_boxes):
            assert iou(lab.labels, shape.cloud.labels, k) >= 0.9


def test_scan_residual_oracle():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(60, 3)), rng.normal(size=(80, 3))
    brute = np.mean([min(math.dist(p, q) for q in b) for p in a])
    assert scan_residual(a, b) == pytest.approx(brute, abs=1e-12)
    assert scan_residual(a, a) == 0


@pytest.fixture(scope="module")
def pipeline(by_name, library):
    rng = np.random.default_rng(8)
    shapes = [make_shape(by_name[n], rng, n_points=1500, shape_id=f"{n}_{k}")
              for n in ("table", "mug") for k in range(3)]
    fam = {"table": "table", "mug": "mug"}
    idx = preprocess_collection([(s.shape_id, fam[s.shape_id.split("_")[0]], s.cloud)
                                 for s in shapes], library, QUICK, clusters_per_template=2)
    label = {r.shape_id: r.cluster for r in idx.records}
    data = [(cloud_features(s.cloud), label[s.shape_id]) for s in shapes]
    model, _ = train(data, TrainConfig(epochs=60, hidden=(32,)), n_classes=idx.n_clusters)
    return shapes, idx, model


def test_identify_full_shape(pipeline):
    shapes, idx, model = pipeline
    for s in shapes[::3]:
        ident = identify_partial(s.cloud, idx, model, k=2, config=QUICK)
        assert ident.template_id == s.template_id
        assert ident.fit.e_total == min(e for _, _, e in ident.considered)
        assert abs(ident.probabilities.sum() - 1) < 1e-9
    one = identify_partial(shapes[0].cloud, idx, model, k=1, config=QUICK)
    assert len(one.considered) == 1


def test_recover_indexed_shape(pipeline):
    shapes, idx, model = pipeline
    s = shapes[1]
    rec = recover_shape(s.cloud, idx, model, k=2, config=QUICK)
    assert rec.source_id == s.shape_id
    assert rec.residual < 0.02
    assert rec.geometry.labels.min() >= 0
    assert rec.geometry.labels.max() < idx.templates[s.template_id].n_boxes
    tb = template_bounding_box(rec.identification.fit.boxes)
    bb = bounding_box(rec.geometry)
    assert np.allclose(bb.lo, tb.lo, atol=1e-6) and np.allclose(bb.hi, tb.hi, atol=1e-6)


def test_recover_occluded_is_complete(pipeline):
    shapes, idx, model = pipeline
    s = shapes[4]
    scan = occlude_half(s.cloud, np.random.default_rng(9))
    rec = recover_shape(scan, idx, model, k=2, config=QUICK)
    assert bounding_box(rec.geometry).volume >= bounding_box(scan).volume
    assert '"format": "boxtemplates-recovery/1"' in rec.dumps()


def test_model_index_mismatch(pipeline):
    shapes, idx, _ = pipeline
    from boxtemplates.classify import init_model
    with pytest.raises(DimensionMismatch):
        identify_partial(shapes[0].cloud, idx, init_model([512, 4, idx.n_clusters + 1]))


def test_corner_oracle_enumerates_all():
    c = oracles.box_corners((0, 0, 0), (2, 2, 2))
    assert sorted(map(tuple, c)) == sorted(itertools.product((-1, 1), repeat=3))
