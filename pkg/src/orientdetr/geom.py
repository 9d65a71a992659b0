"""Oriented-box geometry.

Boxes are ``(cx, cy, w, h, theta)`` in normalised image coordinates with
``theta`` in radians. ``w`` runs along ``(cos theta, sin theta)`` and ``h``
along ``(-sin theta, cos theta)``. The canonical form keeps the long side as
``h`` with ``theta`` in ``[0, pi)``; squares reduce ``theta`` into
``[0, pi/2)``.

Two IoU paths exist: :func:`rotated_iou` clips polygons exactly per pair,
:func:`rotated_iou_tensor` evaluates batches of pairs with gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_CROSS = 1e-12
EPS_DEDUP = 1e-9
HALF_PI = 0.5 * math.pi


class GeometryError(ValueError):
    """Raised for non-finite or otherwise invalid geometric input."""


@dataclass(frozen=True)
class OrientedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise GeometryError(f"non-finite box field in {values}")

    @classmethod
    def from_array(cls, arr):
        cx, cy, w, h, theta = (float(v) for v in arr)
        return cls(cx, cy, w, h, theta)

    @classmethod
    def parse(cls, text):
        """Parse ``"cx cy w h theta"``."""
        parts = text.split()
        if len(parts) != 5:
            raise GeometryError(f"expected 5 numbers 'cx cy w h theta', got {text!r}")
        try:
            return cls.from_array([float(p) for p in parts])
        except ValueError:
            raise GeometryError(f"could not parse box {text!r}") from None

    def to_array(self):
        return np.array([self.cx, self.cy, self.w, self.h, self.theta])

    @property
    def area(self):
        return self.w * self.h


@dataclass
class ConvexPolygon:
    vertices: np.ndarray
    degenerate: bool = field(default=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.vertices)

    @property
    def is_empty(self):
        return len(self.vertices) < 3

    def is_convex(self, tol=EPS_CROSS):
        v = self.vertices
        n = len(v)
        if n < 3:
            return False
        e = np.roll(v, -1, axis=0) - v
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        return bool(np.all(cross >= -tol) or np.all(cross <= tol))


# -- vertices ---------------------------------------------------------------
def box_vertices(box) -> np.ndarray:
    """Four corners of ``box`` as a (4, 2) array, ordered j = 1..4.

    With u = (cos t, sin t) and v = (-sin t, cos t), corner j sits at
    center + 1/2 (a_j w u + b_j h v) where a_j = cos(floor((j-1)/2) pi) and
    b_j = cos(ceil((j+1)/2) pi). The order runs anticlockwise (y up).
    """
    if not isinstance(box, OrientedBox):
        box = OrientedBox.from_array(box)
    if box.w <= 0 or box.h <= 0:
        raise GeometryError(f"box sides must be positive, got w={box.w}, h={box.h}")
    c, s = math.cos(box.theta), math.sin(box.theta)
    out = np.empty((4, 2))
    for j in range(1, 5):
        a = math.cos(math.floor((j - 1) / 2) * math.pi)
        b = math.cos(math.ceil((j + 1) / 2) * math.pi)
        out[j - 1, 0] = box.cx + 0.5 * (c * a * box.w - s * b * box.h)
        out[j - 1, 1] = box.cy + 0.5 * (s * a * box.w + c * b * box.h)
    return out


# corner signs (a_j, b_j) of the formula above, for vectorised use
_CORNER_A = np.array([1.0, 1.0, -1.0, -1.0])
_CORNER_B = np.array([-1.0, 1.0, 1.0, -1.0])


def box_vertices_array(boxes) -> np.ndarray:
    """Vectorised :func:`box_vertices` for an (..., 5) array -> (..., 4, 2)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h, t = (boxes[..., i, None] for i in range(5))
    c, s = np.cos(t), np.sin(t)
    x = cx + 0.5 * (c * _CORNER_A * w - s * _CORNER_B * h)
    y = cy + 0.5 * (s * _CORNER_A * w + c * _CORNER_B * h)
    return np.stack([x, y], axis=-1)


# -- canonical form --------------------------------------------------------
def canonicalize(box):
    """Long side as ``h``; ``theta`` in ``[0, pi)`` (``[0, pi/2)`` for squares)."""
    if not isinstance(box, OrientedBox):
        box = OrientedBox.from_array(box)
    cx, cy, w, h, t = box.cx, box.cy, box.w, box.h, box.theta
    if w > h:
        w, h = h, w
        t = t + HALF_PI
    period = HALF_PI if w == h else math.pi
    t = math.fmod(t, period)
    if t < 0:
        t += period
    if t >= period:
        t = 0.0
    return OrientedBox(cx, cy, w, h, t)


def canonicalize_array(boxes) -> np.ndarray:
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    swap = boxes[..., 2] > boxes[..., 3]
    w = np.where(swap, boxes[..., 3], boxes[..., 2])
    h = np.where(swap, boxes[..., 2], boxes[..., 3])
    t = boxes[..., 4] + np.where(swap, HALF_PI, 0.0)
    period = np.where(w == h, HALF_PI, math.pi)
    t = np.mod(t, period)
    t = np.where(t >= period, 0.0, t)
    boxes[..., 2], boxes[..., 3], boxes[..., 4] = w, h, t
    return boxes


def min_area_rect(points) -> OrientedBox:
    """Smallest enclosing rectangle of a point set, in canonical form."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise GeometryError("min_area_rect needs at least 3 non-collinear points")
    best = None
    for i in range(len(hull)):
        d = hull[(i + 1) % len(hull)] - hull[i]
        norm = math.hypot(d[0], d[1])
        if norm < EPS_CROSS:
            continue
        u = d / norm
        v = np.array([-u[1], u[0]])
        pu = hull @ u
        pv = hull @ v
        w = pu.max() - pu.min()
        h = pv.max() - pv.min()
        if best is None or w * h < best[0] - 1e-15:
            mid_u = 0.5 * (pu.max() + pu.min())
            mid_v = 0.5 * (pv.max() + pv.min())
            center = mid_u * u + mid_v * v
            best = (w * h, center, w, h, math.atan2(u[1], u[0]))
    _, center, w, h, t = best
    return canonicalize(OrientedBox(float(center[0]), float(center[1]), float(w), float(h), t))


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; returns the hull anticlockwise without repeats."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= EPS_CROSS:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= EPS_CROSS:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


# -- polygons ---------------------------------------------------------------
def signed_area(vertices) -> float:
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    """Shoelace area; fewer than three vertices gives 0."""
    verts = poly.vertices if isinstance(poly, ConvexPolygon) else poly
    return abs(signed_area(verts))


def _anticlockwise(v):
    return v[::-1].copy() if signed_area(v) < 0 else v


def _dedup(points):
    out = []
    for p in points:
        if not out or math.hypot(p[0] - out[-1][0], p[1] - out[-1][1]) > EPS_DEDUP:
            out.append(p)
    while len(out) > 1 and math.hypot(out[0][0] - out[-1][0], out[0][1] - out[-1][1]) <= EPS_DEDUP:
        out.pop()
    return out


def polygon_clip(subject, clip) -> ConvexPolygon:
    """Intersection of two convex polygons by Sutherland-Hodgman clipping.

    Output is anticlockwise. A zero-area input yields an empty polygon with
    ``degenerate`` set.
    """
    subj = subject.vertices if isinstance(subject, ConvexPolygon) else np.asarray(subject, float)
    clp = clip.vertices if isinstance(clip, ConvexPolygon) else np.asarray(clip, float)
    if len(subj) < 3 or len(clp) < 3:
        raise GeometryError("polygon_clip needs polygons with at least 3 vertices")
    if abs(signed_area(subj)) <= EPS_CROSS or abs(signed_area(clp)) <= EPS_CROSS:
        return ConvexPolygon(np.empty((0, 2)), degenerate=True)
    subj = _anticlockwise(subj)
    clp = _anticlockwise(clp)

    output = [tuple(p) for p in subj]
    n = len(clp)
    for i in range(n):
        if not output:
            break
        ax, ay = clp[i]
        bx, by = clp[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs = output
        output = []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= -EPS_CROSS:
                if s_prev < -EPS_CROSS:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= -EPS_CROSS:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
        output = _dedup(output)
    if len(output) < 3:
        return ConvexPolygon(np.empty((0, 2)))
    result = np.array(output)
    if abs(signed_area(result)) <= EPS_CROSS:
        return ConvexPolygon(np.empty((0, 2)))
    return ConvexPolygon(_anticlockwise(result))


def _intersect(p, q, sp, sq):
    # sp and sq have opposite signs (or one is ~0), so the denominator is safe
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a, b) -> float:
    """Exact IoU of two oriented boxes via polygon clipping."""
    a = a if isinstance(a, OrientedBox) else OrientedBox.from_array(a)
    b = b if isinstance(b, OrientedBox) else OrientedBox.from_array(b)
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        return 0.0
    # cheap rejection on circumscribed circles
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = polygon_area(polygon_clip(box_vertices(a), box_vertices(b)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def rotate_box(box, angle, origin=(0.0, 0.0)) -> OrientedBox:
    """Rotate ``box`` rigidly by ``angle`` about ``origin``."""
    box = box if isinstance(box, OrientedBox) else OrientedBox.from_array(box)
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = box.cx - origin[0], box.cy - origin[1]
    return OrientedBox(origin[0] + c * dx - s * dy, origin[1] + s * dx + c * dy,
                       box.w, box.h, box.theta + angle)


# -- batched differentiable IoU --------------------------------------------
def _cross2(ax, ay, bx, by):
    return ax * by - ay * bx


def _tensor_vertices(boxes):
    """(P, 5) tensor -> x, y tensors of shape (P, 4)."""
    cx, cy, w, h, t = (boxes[:, i : i + 1] for i in range(5))
    c, s = T.cos(t), T.sin(t)
    hw = w * 0.5
    hh = h * 0.5
    x = cx + c * hw * _CORNER_A - s * hh * _CORNER_B
    y = cy + s * hw * _CORNER_A + c * hh * _CORNER_B
    return x, y


def rotated_iou_tensor(a, b, eps=1e-9) -> Tensor:
    """IoU for P box pairs given as (P, 5) tensors; differentiable in both.

    The overlap polygon is assembled from corners of one box inside the
    other plus all edge-edge crossings, sorted by angle about their mean and
    measured with the shoelace formula. Coincident candidates contribute
    zero-length edges, so no de-duplication is needed.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim != 2 or a.shape[1] != 5 or a.shape != b.shape:
        raise T.DimensionError(f"rotated_iou_tensor: expected matching (P, 5), got {a.shape}, {b.shape}")
    p = a.shape[0]
    if p == 0:
        return T.Tensor(np.zeros(0))
    ax, ay = _tensor_vertices(a)
    bx, by = _tensor_vertices(b)

    in_b = _inside_mask(ax.data, ay.data, b.data, eps)
    in_a = _inside_mask(bx.data, by.data, a.data, eps)

    # edges i of a (a_i -> a_{i+1}) against edges j of b
    nxt = [1, 2, 3, 0]
    a0x, a0y = ax[:, :, None], ay[:, :, None]
    dax = (ax[:, nxt] - ax)[:, :, None]
    day = (ay[:, nxt] - ay)[:, :, None]
    b0x, b0y = bx[:, None, :], by[:, None, :]
    dbx = (bx[:, nxt] - bx)[:, None, :]
    dby = (by[:, nxt] - by)[:, None, :]
    den = _cross2(dax, day, dbx, dby)
    relx, rely = b0x - a0x, b0y - a0y
    den_ok = np.abs(den.data) > EPS_CROSS
    safe_den = T.where(den_ok, den, 1.0)
    ta = _cross2(relx, rely, dbx, dby) / safe_den
    tb = _cross2(relx, rely, dax, day) / safe_den
    hit = den_ok & (ta.data >= -eps) & (ta.data <= 1 + eps) & (tb.data >= -eps) & (tb.data <= 1 + eps)
    ix = (a0x + ta * dax).reshape(p, 16)
    iy = (a0y + ta * day).reshape(p, 16)

    px = T.concat([ax, bx, ix], axis=1)
    py = T.concat([ay, by, iy], axis=1)
    valid = np.concatenate([in_b, in_a, hit.reshape(p, 16)], axis=1)
    count = valid.sum(axis=1)

    cnt = np.maximum(count, 1)[:, None]
    mx = np.where(valid, px.data, 0.0).sum(axis=1, keepdims=True) / cnt
    my = np.where(valid, py.data, 0.0).sum(axis=1, keepdims=True) / cnt
    ang = np.arctan2(py.data - my, px.data - mx)
    ang = np.where(valid, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sx = T.gather(px, order, axis=1)
    sy = T.gather(py, order, axis=1)
    svalid = np.take_along_axis(valid, order, axis=1)
    sx = T.where(svalid, sx, sx[:, 0:1])
    sy = T.where(svalid, sy, sy[:, 0:1])
    roll = list(range(1, 24)) + [0]
    twice = (sx * sy[:, roll] - sx[:, roll] * sy).sum(axis=1)
    inter = T.where(count >= 3, T.absolute(twice) * 0.5, 0.0)

    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a + area_b - inter
    union = T.where(union.data > 0, union, 1.0)
    return inter / union


def _inside_mask(px, py, boxes, eps):
    """Which of the (P, 4) points lie inside the matching (P, 5) boxes."""
    cx, cy, w, h, t = (boxes[:, i : i + 1] for i in range(5))
    c, s = np.cos(t), np.sin(t)
    dx, dy = px - cx, py - cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * w + eps) & (np.abs(v) <= 0.5 * h + eps)


def rotated_iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between (N, 5) and (M, 5) arrays, no gradient."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    aa = np.repeat(a, m, axis=0)
    bb = np.tile(b, (n, 1))
    with T.no_grad():
        iou = rotated_iou_tensor(aa, bb).data
    return np.clip(iou, 0.0, 1.0).reshape(n, m)
