import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from boxtemplates.errors import BadResolution, EmptyCloud, EmptyList, InputError
from boxtemplates.geometry import (AABox, PointCloud, bounding_box, box_intersection_volume,
                                   box_volume, normalize_to_unit_cube, point_to_box_distance,
                                   points_to_boxes_distance, rasterize_distance_grid,
                                   template_bounding_box)

# dyadic values keep every comparison exact
coord = st.integers(-96, 96).map(lambda k: k / 32)
length = st.integers(0, 96).map(lambda k: k / 32)
boxes = st.builds(lambda c, s: AABox(c, s), st.tuples(coord, coord, coord),
                  st.tuples(length, length, length))
points = st.tuples(coord, coord, coord)

UNIT = AABox((0, 0, 0), (1, 1, 1))


def test_point_to_box_distance_examples():
    assert point_to_box_distance((0, 0, 0), UNIT) == 0
    assert point_to_box_distance((2, 0, 0), UNIT) == 1.5
    assert point_to_box_distance((1, 1, 0), UNIT) == pytest.approx(0.70710678, abs=1e-8)


def test_corner_distance_against_surface_sampling():
    # the closest surface point of the unit box to (1,1,0) lies on the edge x=y=0.5
    rng = np.random.default_rng(3)
    u = rng.uniform(-0.5, 0.5, size=(200_000, 3))
    face = rng.integers(3, size=len(u))
    u[np.arange(len(u)), face] = np.sign(u[np.arange(len(u)), face]) * 0.5
    d = np.min(np.linalg.norm(u - np.array([1.0, 1.0, 0.0]), axis=1))
    assert d == pytest.approx(point_to_box_distance((1, 1, 0), UNIT), abs=1e-2)


def test_box_volume_examples():
    assert box_volume(UNIT) == 1
    assert box_volume(AABox((0, 0, 0), (2, 0.5, 3))) == 3
    assert box_volume(AABox((0, 0, 0), (0, 1, 1))) == 0


def test_box_intersection_examples():
    assert box_intersection_volume(UNIT, AABox((5, 0, 0), (1, 1, 1))) == 0
    assert box_intersection_volume(UNIT, UNIT) == 1
    assert box_intersection_volume(UNIT, AABox((0.5, 0, 0), (1, 1, 1))) == 0.5


def test_intersection_monte_carlo():
    rng = np.random.default_rng(0)
    b = AABox((0.5, 0, 0), (1, 1, 1))
    p = rng.uniform([-0.5, -0.5, -0.5], [1.0, 0.5, 0.5], size=(400_000, 3))
    both = np.all(np.abs(p - UNIT.center) <= 0.5, axis=1) & np.all(np.abs(p - b.center) <= 0.5, axis=1)
    est = both.mean() * 1.5
    assert est == pytest.approx(0.5, abs=5e-3)


def test_bounding_box_examples():
    bb = bounding_box(np.array([[0, 0, 0], [1, 2, 3.0]]))
    assert bb.center == (0.5, 1, 1.5) and bb.size == (1, 2, 3)
    one = bounding_box(np.array([[0.3, -1, 2.0]]))
    assert one.size == (0, 0, 0) and one.center == (0.3, -1, 2)
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, size=(1000, 3))
    s = np.array(bounding_box(pts).size)
    assert np.all((s >= 0.99) & (s <= 1.0))
    with pytest.raises(EmptyCloud):
        bounding_box(np.zeros((0, 3)))


def test_template_bounding_box_examples():
    assert template_bounding_box([UNIT]) == UNIT
    bb = template_bounding_box([UNIT, AABox((1, 0, 0), (1, 1, 1))])
    assert bb.center == (0.5, 0, 0) and bb.size == (2, 1, 1)
    assert template_bounding_box([AABox((0, 0, 0), (4, 4, 4)), UNIT]) == AABox((0, 0, 0), (4, 4, 4))
    with pytest.raises(EmptyList):
        template_bounding_box([])


def test_invalid_boxes_and_clouds():
    with pytest.raises(InputError):
        AABox((0, 0, 0), (-1, 1, 1))
    with pytest.raises(InputError):
        AABox((math.nan, 0, 0), (1, 1, 1))
    with pytest.raises(InputError):
        PointCloud(np.array([[0, 0, math.inf]]))
    with pytest.raises(InputError):
        PointCloud(np.zeros((2, 3)), labels=np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(points, boxes)
def test_distance_zero_iff_inside(p, b):
    d = point_to_box_distance(p, b)
    assert d >= 0
    assert (d == 0) == oracles.inside(p, b.center, b.size)
    assert d == pytest.approx(oracles.point_box_distance(p, b.center, b.size), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_intersection_symmetric_and_bounded(a, b):
    v = box_intersection_volume(a, b)
    assert v == box_intersection_volume(b, a)
    assert 0 <= v <= min(box_volume(a), box_volume(b)) + 1e-12
    assert box_intersection_volume(a, a) == box_volume(a)
    assert v == pytest.approx(oracles.overlap(a.center, a.size, b.center, b.size), abs=1e-12)


def test_vectorized_distances_match_scalar():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    c = rng.normal(size=(4, 3))
    s = rng.uniform(0, 1, size=(4, 3))
    D = points_to_boxes_distance(pts, c, s)
    for i in range(50):
        for j in range(4):
            assert D[i, j] == pytest.approx(oracles.point_box_distance(pts[i], c[j], s[j]), abs=1e-12)


def test_bounding_box_permutation_invariant():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(300, 3))
    assert bounding_box(pts) == bounding_box(pts[rng.permutation(300)])


def test_normalize_to_unit_cube():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(100, 3)) * [3, 1, 0.5] + 7
    n, center, scale = normalize_to_unit_cube(pts)
    bb = bounding_box(n)
    assert max(bb.size) == pytest.approx(1.0)
    assert np.allclose(bb.center, 0, atol=1e-12)
    assert np.allclose(n / scale + center, pts)


def test_grid_single_point_center():
    g = rasterize_distance_grid(np.array([[0.2, 0.3, -0.1]]), resolution=3, truncation=0.5)
    assert g.values[1, 1, 1] == 0
    assert np.all(g.values <= 0.5)


@pytest.mark.parametrize("res", [2, 5, 16])
def test_grid_matches_brute_force(res):
    rng = np.random.default_rng(res)
    pts = rng.uniform(-0.5, 0.5, size=(200, 3)) * [1, 0.6, 0.3]
    g = rasterize_distance_grid(pts, resolution=res, truncation=0.25)
    ref = oracles.nearest_distance_grid(pts.tolist(), g.cell_centers().tolist(), 0.25)
    assert np.max(np.abs(g.values.ravel() - ref)) < 1e-9
    # the grid covers the bbox with one spare cell on each side of the longest axis
    bb = bounding_box(pts)
    lo = np.array(g.origin)
    hi = lo + res * g.cell_size
    assert np.all(lo <= bb.lo) and np.all(hi >= bb.hi)
    assert g.cell_size == pytest.approx(max(bb.size) / max(res - 2, 1))


def test_grid_surface_cells_near_zero():
    from boxtemplates.synthetic import box_surface_cloud
    pts = box_surface_cloud(UNIT, 20_000, np.random.default_rng(0))
    g = rasterize_distance_grid(pts, 32, 0.25)
    centers = g.cell_centers()
    d_surface = np.array([abs(max(np.abs(c)) - 0.5) if max(np.abs(c)) > 0.5 else
                          0.5 - max(np.abs(c)) for c in centers])
    on = d_surface < 0.5 * g.cell_size
    assert on.any()
    assert np.all(g.values.ravel()[on] < 2 * g.cell_size)


def test_grid_errors():
    with pytest.raises(EmptyCloud):
        rasterize_distance_grid(np.zeros((0, 3)))
    with pytest.raises(BadResolution):
        rasterize_distance_grid(np.zeros((1, 3)), resolution=1)
