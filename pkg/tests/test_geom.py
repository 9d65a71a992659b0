import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orientdetr import tensor as T
from orientdetr.geom import (
    ConvexPolygon,
    GeometryError,
    OrientedBox,
    box_vertices,
    box_vertices_array,
    canonicalize,
    canonicalize_array,
    convex_hull,
    min_area_rect,
    polygon_area,
    polygon_clip,
    rotate_box,
    rotated_iou,
    rotated_iou_matrix,
    rotated_iou_tensor,
    signed_area,
)

from gradcheck import check_gradients


def mc_iou(a, b, n_side=400, seed=0):
    """Stratified Monte Carlo IoU over the union bounding box."""
    va, vb = box_vertices(a), box_vertices(b)
    pts = np.vstack([va, vb])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    rng = np.random.default_rng(seed)
    grid = (np.arange(n_side)[:, None] + rng.random((n_side, n_side))) / n_side
    gy = (np.arange(n_side)[None, :] + rng.random((n_side, n_side))) / n_side
    x = lo[0] + grid.T.ravel() * (hi[0] - lo[0])
    y = lo[1] + gy.T.ravel() * (hi[1] - lo[1])

    def inside(box):
        c, s = math.cos(box.theta), math.sin(box.theta)
        dx, dy = x - box.cx, y - box.cy
        return (np.abs(dx * c + dy * s) <= box.w / 2) & (np.abs(-dx * s + dy * c) <= box.h / 2)

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


boxes = st.builds(
    OrientedBox,
    cx=st.floats(0.2, 0.8),
    cy=st.floats(0.2, 0.8),
    w=st.floats(0.05, 0.4),
    h=st.floats(0.05, 0.4),
    theta=st.floats(-math.pi, math.pi),
)


def test_vertex_order_matches_corner_formula():
    v = box_vertices(OrientedBox(0.5, 0.5, 0.2, 0.1, 0.0))
    assert np.allclose(v, [[0.6, 0.45], [0.6, 0.55], [0.4, 0.55], [0.4, 0.45]])
    assert signed_area(v) > 0


def test_vectorised_vertices_agree():
    rng = np.random.default_rng(0)
    arr = np.column_stack([rng.random((20, 2)), rng.uniform(0.05, 0.3, (20, 2)), rng.uniform(-3, 3, 20)])
    batch = box_vertices_array(arr)
    for row, v in zip(arr, batch):
        assert np.allclose(box_vertices(row), v, atol=1e-15)


def test_square_at_45_degrees():
    a = OrientedBox(0.0, 0.0, 1.0, 1.0, 0.0)
    b = OrientedBox(0.0, 0.0, 1.0, 1.0, math.pi / 4)
    # octagon area 2(sqrt 2 - 1), union 2 - that
    inter = 2 * (math.sqrt(2) - 1)
    assert rotated_iou(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)


def test_identical_disjoint_and_contained():
    a = OrientedBox(0.5, 0.5, 0.2, 0.4, 0.3)
    assert rotated_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert rotated_iou(a, OrientedBox(2.0, 2.0, 0.2, 0.4, 0.3)) == 0.0
    inner = OrientedBox(0.5, 0.5, 0.1, 0.2, 0.3)
    assert rotated_iou(a, inner) == pytest.approx(0.25, abs=1e-12)


def test_touching_edges_give_zero():
    a = OrientedBox(0.0, 0.0, 1.0, 1.0, 0.0)
    b = OrientedBox(1.0, 0.0, 1.0, 1.0, 0.0)
    assert rotated_iou(a, b) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_iou_against_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    a = canonicalize(OrientedBox(0.5, 0.5, *rng.uniform(0.1, 0.4, 2), rng.uniform(0, math.pi)))
    b = canonicalize(OrientedBox(*rng.uniform(0.4, 0.6, 2), *rng.uniform(0.1, 0.4, 2), rng.uniform(0, math.pi)))
    assert abs(rotated_iou(a, b) - mc_iou(a, b)) <= 5e-3


@settings(max_examples=200, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = rotated_iou(a, b), rotated_iou(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(boxes, boxes, st.floats(-math.pi, math.pi), st.floats(-1, 1), st.floats(-1, 1))
def test_iou_invariant_under_rigid_motion(a, b, angle, dx, dy):
    ra = rotate_box(a, angle, (0.3, 0.7))
    rb = rotate_box(b, angle, (0.3, 0.7))
    ra = OrientedBox(ra.cx + dx, ra.cy + dy, ra.w, ra.h, ra.theta)
    rb = OrientedBox(rb.cx + dx, rb.cy + dy, rb.w, rb.h, rb.theta)
    assert rotated_iou(ra, rb) == pytest.approx(rotated_iou(a, b), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes)
def test_canonical_form(box):
    c = canonicalize(box)
    assert c.w <= c.h
    assert 0.0 <= c.theta < math.pi
    if c.w == c.h:
        assert c.theta < math.pi / 2
    # same region: IoU with the original is 1 and canonicalisation is idempotent
    assert rotated_iou(c, box) == pytest.approx(1.0, abs=1e-9)
    assert canonicalize(c) == c
    assert np.allclose(canonicalize_array(box.to_array()), c.to_array())


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_clip_area_bounded_and_convex(a, b):
    poly = polygon_clip(box_vertices(a), box_vertices(b))
    area = polygon_area(poly)
    assert area <= min(a.area, b.area) + 1e-12
    if not poly.is_empty:
        assert poly.is_convex()
        assert signed_area(poly.vertices) > 0


def test_clip_degenerate_input_flagged():
    flat = np.array([[0, 0], [1, 0], [2, 0]], dtype=float)
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    poly = polygon_clip(flat, square)
    assert poly.is_empty and poly.degenerate
    with pytest.raises(GeometryError):
        polygon_clip(square[:2], square)


def test_clip_orientation_independent():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    tri = np.array([[0.5, -0.5], [1.5, 0.5], [0.5, 0.5]])
    assert polygon_area(polygon_clip(sq, tri)) == pytest.approx(polygon_area(polygon_clip(sq[::-1], tri[::-1])))
    assert polygon_area(polygon_clip(sq, tri)) == pytest.approx(0.25)


def test_hull_and_min_area_rect_recover_box():
    box = canonicalize(OrientedBox(0.3, -0.2, 0.4, 0.9, 1.1))
    rng = np.random.default_rng(3)
    inner = box_vertices(OrientedBox(box.cx, box.cy, box.w * 0.5, box.h * 0.5, box.theta))
    pts = np.vstack([box_vertices(box), inner, rng.normal((box.cx, box.cy), 0.01, (5, 2))])
    assert len(convex_hull(pts)) == 4
    rect = min_area_rect(pts)
    assert np.allclose(rect.to_array(), box.to_array(), atol=1e-9)


def test_invalid_boxes_rejected():
    with pytest.raises(GeometryError):
        OrientedBox(float("nan"), 0, 1, 1, 0)
    with pytest.raises(GeometryError):
        box_vertices(OrientedBox(0, 0, -1, 1, 0))
    with pytest.raises(GeometryError):
        OrientedBox.parse("1 2 3")
    assert ConvexPolygon(np.zeros((2, 2))).is_empty


@settings(max_examples=100, deadline=None)
@given(boxes, boxes)
def test_batched_iou_matches_exact(a, b):
    with T.no_grad():
        batched = rotated_iou_tensor(a.to_array()[None], b.to_array()[None]).data[0]
    # corners within the 1e-9 inclusion margin count as inside, adding slivers of
    # width <= 1e-9 along the edges; union >= larger area bounds the IoU error
    slack = 1e-9 * 2 * (a.w + a.h + b.w + b.h)
    tol = 2 * slack / max(a.area, b.area) + 1e-12
    assert batched == pytest.approx(rotated_iou(a, b), abs=tol)


def test_iou_matrix_matches_pairwise():
    rng = np.random.default_rng(1)
    a = np.column_stack([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.3, (6, 2)), rng.uniform(0, 3, 6)])
    b = np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2)), rng.uniform(0, 3, 4)])
    m = rotated_iou_matrix(a, b)
    for i in range(6):
        for j in range(4):
            assert m[i, j] == pytest.approx(rotated_iou(a[i], b[j]), abs=1e-12)


def test_batched_iou_gradients():
    a = np.array([[0.5, 0.5, 0.3, 0.2, 0.3], [0.4, 0.5, 0.2, 0.4, 1.2], [0.5, 0.5, 0.2, 0.2, 0.0]])
    b = np.array([[0.55, 0.48, 0.25, 0.3, 0.9], [0.45, 0.52, 0.3, 0.3, 0.4], [0.6, 0.55, 0.3, 0.1, 0.7]])
    assert check_gradients(rotated_iou_tensor, a, b) <= 1e-6
