"""Exact polygon and mask geometry: IoU kernels, greedy NMS, min-area
rotated rectangles, and mask-to-polygon fitting.

Conventions: points are (x, y) with x right and y down (image coordinates).
A polygon is an (N, 2) float array of vertices, implicitly closed, ordered
counter-clockwise, meaning the shoelace signed area is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon as _ShapelyPolygon


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# polygons

def signed_area(vertices: np.ndarray) -> float:
    """Shoelace signed area; positive for counter-clockwise vertex order."""
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def as_polygon(vertices) -> np.ndarray:
    """Validate and canonicalize a polygon: simple, positive area, CCW order.

    Raises GeometryError for degenerate input (fewer than 3 vertices,
    self-intersection, or zero area).
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise GeometryError(f"polygon needs >= 3 (x, y) vertices, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise GeometryError("polygon has non-finite vertices")
    shp = _ShapelyPolygon(v)
    if not shp.is_valid or shp.area <= 0.0:
        raise GeometryError("polygon is not simple or has zero area")
    if signed_area(v) < 0:
        v = v[::-1].copy()
    return v


def polygon_iou(a, b) -> float:
    """Exact intersection-over-union of two simple polygons via clipping."""
    pa = _ShapelyPolygon(as_polygon(a))
    pb = _ShapelyPolygon(as_polygon(b))
    inter = pa.intersection(pb).area
    if inter == 0.0:
        return 0.0
    union = pa.area + pb.area - inter
    return float(inter / union)


def rasterize_polygon_in_box(polygon, box, out_shape) -> np.ndarray:
    """Rasterize a polygon into a grid registered to an axis-aligned box.

    Grid cell (i, j) of ``out_shape = (H, W)`` samples the image point at
    ``(x0 + (j + 0.5) * bw / W, y0 + (i + 0.5) * bh / H)``. Returns a float
    {0, 1} mask via the even-odd rule.
    """
    poly = np.asarray(polygon, dtype=np.float64)
    x0, y0, x1, y1 = (float(c) for c in box)
    h, w = out_shape
    xs = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w
    ys = y0 + (np.arange(h) + 0.5) * (y1 - y0) / h
    px = np.broadcast_to(xs[None, :], (h, w)).ravel()
    py = np.broadcast_to(ys[:, None], (h, w)).ravel()
    inside = np.zeros(h * w, dtype=bool)
    n = len(poly)
    for k in range(n):
        ax, ay = poly[k]
        bx, by = poly[(k + 1) % n]
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside.reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# masks

def mask_iou(a, b) -> float:
    """Pixelwise IoU of two same-shape bitmasks; 0 when the union is empty."""
    am = np.asarray(a)
    bm = np.asarray(b)
    if am.shape != bm.shape:
        raise GeometryError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    am = am.astype(bool)
    bm = bm.astype(bool)
    union = np.logical_or(am, bm).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(am, bm).sum()
    return float(inter) / float(union)


# ---------------------------------------------------------------------------
# boxes

def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) / (M, 4) arrays of (x0, y0, x1, y1) boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix1 - ix0, 0.0, None)
    ih = np.clip(iy1 - iy0, 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


# ---------------------------------------------------------------------------
# NMS

def greedy_nms(items, scores, iou_fn, threshold: float) -> list[int]:
    """Greedy non-maximum suppression over arbitrary items.

    Iterates by descending score (ties broken by lower index); an item is
    kept iff its IoU with every already-kept item is <= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(items):
        raise GeometryError("scores and items length mismatch")
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    for idx in order:
        i = int(idx)
        if all(iou_fn(items[i], items[k]) <= threshold for k in keep):
            keep.append(i)
    return keep


def box_nms(boxes: np.ndarray, scores: np.ndarray, threshold: float,
            max_keep: int | None = None) -> list[int]:
    """Vectorized greedy NMS on (N, 4) boxes; same keep set as greedy_nms.

    The keep list is generated in descending-score order, so ``max_keep``
    truncates it without changing the surviving prefix.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = len(boxes)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep: list[int] = []
    while order.size:
        i = int(order[0])
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        ix0 = np.maximum(boxes[i, 0], boxes[rest, 0])
        iy0 = np.maximum(boxes[i, 1], boxes[rest, 1])
        ix1 = np.minimum(boxes[i, 2], boxes[rest, 2])
        iy1 = np.minimum(boxes[i, 3], boxes[rest, 3])
        inter = np.clip(ix1 - ix0, 0.0, None) * np.clip(iy1 - iy0, 0.0, None)
        union = areas[i] + areas[rest] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        order = rest[iou <= threshold]
    return keep


# ---------------------------------------------------------------------------
# min-area rotated rectangle

@dataclass(frozen=True)
class RotatedRect:
    """Rotated rectangle with width >= height and angle in [-pi/2, pi/2).

    ``angle`` is the direction of the width axis, measured from +x toward +y.
    """

    center: tuple[float, float]
    width: float
    height: float
    angle: float

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.array([c, s]) * (self.width / 2.0)
        v = np.array([-s, c]) * (self.height / 2.0)
        ctr = np.asarray(self.center, dtype=np.float64)
        return np.stack([ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v])


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, collinear points dropped."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise GeometryError("convex hull needs >= 3 distinct points")
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) < 3:
        raise GeometryError("points are collinear")
    return hull


def min_area_rect(points_or_mask) -> RotatedRect:
    """Minimum-area enclosing rotated rectangle of points or mask foreground.

    Sweeps the convex hull edge directions (the optimal rectangle always has
    one side collinear with a hull edge); exact up to floating round-off.
    Masks contribute their foreground pixel centers as (x, y) = (col, row).
    """
    arr = np.asarray(points_or_mask)
    if arr.ndim == 2 and (arr.shape[1] != 2 or arr.dtype == bool):
        rows, cols = np.nonzero(arr.astype(bool))
        if len(rows) == 0:
            raise GeometryError("mask has no foreground")
        pts = np.stack([cols, rows], axis=1).astype(np.float64)
    else:
        pts = arr.astype(np.float64).reshape(-1, 2)
    hull = convex_hull(pts)
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0]) % (np.pi / 2.0)
    best = None
    for ang in np.unique(angles):
        c, s = math.cos(ang), math.sin(ang)
        rot = hull @ np.array([[c, -s], [s, c]])  # rotate by -ang
        x0, y0 = rot.min(axis=0)
        x1, y1 = rot.max(axis=0)
        area = (x1 - x0) * (y1 - y0)
        if best is None or area < best[0]:
            best = (area, ang, x0, y0, x1, y1)
    _, ang, x0, y0, x1, y1 = best
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    c, s = math.cos(ang), math.sin(ang)
    center = (cx * c - cy * s, cx * s + cy * c)
    w, h = x1 - x0, y1 - y0
    if h > w:
        w, h = h, w
        ang += np.pi / 2.0
    ang = (ang + np.pi / 2.0) % np.pi - np.pi / 2.0
    return RotatedRect(center=(float(center[0]), float(center[1])),
                       width=float(w), height=float(h), angle=float(ang))


# ---------------------------------------------------------------------------
# mask -> polygon fitting

_RIGHT_OF = {(1, 0): (0, 1), (0, 1): (-1, 0), (-1, 0): (0, -1), (0, -1): (1, 0)}


def _side_pixels(vertex, direction):
    """Pixels adjacent to the crack edge vertex -> vertex+direction:
    (right-of-travel, left-of-travel). Pixel (r, c) spans [c, c+1] x [r, r+1]."""
    x, y = vertex
    if direction == (1, 0):
        return (y, x), (y - 1, x)
    if direction == (0, 1):
        return (y, x - 1), (y, x)
    if direction == (-1, 0):
        return (y - 1, x - 1), (y, x - 1)
    return (y - 1, x), (y - 1, x - 1)


def _trace_crack_boundary(fg: np.ndarray) -> np.ndarray:
    """Outer boundary of a 4-connected foreground set, walked along pixel
    edges with the foreground on the right of travel. Vertices are integer
    crack coordinates (x in [0, W], y in [0, H]); corners are exact.

    At diagonal pinch corners the walk hugs the current arm (right-turn
    preference), then duplicated vertices are nudged apart so the returned
    loop is simple.
    """
    h, w = fg.shape

    def is_fg(pix):
        r, c = pix
        return 0 <= r < h and 0 <= c < w and fg[r, c]

    rows, cols = np.nonzero(fg)
    start = (int(cols[0]), int(rows[0]))  # top-left corner of first fg pixel
    start_dir = (1, 0)
    verts = []
    vertex, direction = start, start_dir
    while True:
        verts.append(vertex)
        nxt = (vertex[0] + direction[0], vertex[1] + direction[1])
        # pick the outgoing direction at the next vertex: right turn first,
        # then straight, then left turn
        right = _RIGHT_OF[direction]
        left = _RIGHT_OF[_RIGHT_OF[right]]
        for cand in (right, direction, left):
            pr, pl = _side_pixels(nxt, cand)
            if is_fg(pr) and not is_fg(pl):
                direction = cand
                break
        else:  # isolated single pixel loops through all four right turns
            direction = right
        vertex = nxt
        if vertex == start and direction == start_dir:
            break
    points = np.asarray(verts, dtype=np.float64)
    # drop collinear run midpoints
    prev_dir = np.sign(points - np.roll(points, 1, axis=0))
    next_dir = np.sign(np.roll(points, -1, axis=0) - points)
    corners = np.any(prev_dir != next_dir, axis=1)
    points = points[corners]
    # separate pinch-corner double visits
    _, first, counts = np.unique(points, axis=0, return_index=True,
                                 return_counts=True)
    for idx in first[counts > 1]:
        dupes = np.nonzero((points == points[idx]).all(axis=1))[0]
        for k in dupes:
            mid = (points[(k - 1) % len(points)] + points[(k + 1) % len(points)]) / 2
            step = mid - points[k]
            norm = np.hypot(step[0], step[1])
            if norm > 0:
                points[k] = points[k] + 0.25 * step / norm
    return points


def _simplify_chain(points: np.ndarray, eps: float) -> np.ndarray:
    """Douglas-Peucker on an open polyline, keeping both endpoints."""
    if len(points) <= 2:
        return points
    start, end = points[0], points[-1]
    seg = end - start
    seg_len = np.hypot(*seg)
    rel = points[1:-1] - start
    if seg_len == 0.0:
        dists = np.hypot(rel[:, 0], rel[:, 1])
    else:
        dists = np.abs(seg[0] * rel[:, 1] - seg[1] * rel[:, 0]) / seg_len
    k = int(np.argmax(dists))
    if dists[k] <= eps:
        return np.stack([start, end])
    left = _simplify_chain(points[: k + 2], eps)
    right = _simplify_chain(points[k + 1:], eps)
    return np.concatenate([left[:-1], right])


def simplify_closed(points: np.ndarray, eps: float) -> np.ndarray:
    """Douglas-Peucker a closed polyline, anchored at its two farthest-apart
    extreme vertices so the result stays closed."""
    pts = np.asarray(points, dtype=np.float64)
    i = int(np.argmin(pts[:, 0] + pts[:, 1]))
    pts = np.roll(pts, -i, axis=0)
    rel = pts - pts[0]
    j = int(np.argmax(np.hypot(rel[:, 0], rel[:, 1])))
    if j == 0:
        return pts
    first = _simplify_chain(pts[: j + 1], eps)
    second = _simplify_chain(np.concatenate([pts[j:], pts[:1]]), eps)
    return np.concatenate([first[:-1], second[:-1]])


def fit_polygon(mask: np.ndarray, box, n_max: int = 16,
                threshold: float = 0.5, epsilon: float = 1.0) -> np.ndarray:
    """Fit a simple polygon (in image coordinates) to a soft instance mask.

    Thresholds the mask, keeps the largest 4-connected component, traces its
    outer boundary along pixel edges, simplifies with Douglas-Peucker to at
    most ``n_max`` vertices (doubling epsilon as needed), and maps mask-grid
    coordinates into the image through ``box``. A full-foreground mask maps
    to exactly the box corners.

    Raises GeometryError when no foreground survives thresholding, which
    signals that the detection should be rejected.
    """
    m = np.asarray(mask, dtype=np.float64)
    fg = m >= threshold
    if not fg.any():
        raise GeometryError("empty mask foreground: reject detection")
    labels, n_comp = ndimage.label(fg)
    if n_comp > 1:
        counts = np.bincount(labels.ravel())[1:]
        fg = labels == (1 + int(np.argmax(counts)))
    xy = _trace_crack_boundary(fg)
    eps = epsilon
    poly = simplify_closed(xy, eps)
    while len(poly) > n_max:
        eps *= 2.0
        poly = simplify_closed(xy, eps)
    if not _is_simple(poly):
        # rare DP artifact on thin shapes; retreat to the convex hull
        poly = convex_hull(xy)
        while len(poly) > n_max:
            eps *= 2.0
            poly = simplify_closed(poly, eps)
    x0, y0, x1, y1 = (float(c) for c in box)
    h, w = m.shape
    out = np.empty_like(poly)
    out[:, 0] = x0 + poly[:, 0] * (x1 - x0) / w
    out[:, 1] = y0 + poly[:, 1] * (y1 - y0) / h
    return as_polygon(out)


def _is_simple(vertices: np.ndarray) -> bool:
    if len(vertices) < 3:
        return False
    shp = _ShapelyPolygon(vertices)
    return shp.is_valid and shp.area > 0.0
