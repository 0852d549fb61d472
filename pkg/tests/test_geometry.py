import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from textspotter import geometry
from textspotter.geometry import (GeometryError, as_polygon, box_nms,
                                  convex_hull, fit_polygon, greedy_nms,
                                  mask_iou, min_area_rect, polygon_iou,
                                  rasterize_polygon_in_box, signed_area)

from conftest import box_iou_reference, brute_force_nms

UNIT_SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)


def random_simple_polygon(rng, n_min=4, n_max=10, radius=1.0):
    """Star-shaped (hence simple) polygon around a random center; angles on
    a jittered grid so no two vertices share a ray."""
    n = int(rng.integers(n_min, n_max + 1))
    base = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    angles = base + rng.uniform(0.0, 0.8 * 2 * np.pi / n, size=n)
    radii = rng.uniform(0.3 * radius, radius, size=n)
    center = rng.uniform(-1, 1, size=2)
    pts = center + np.stack([radii * np.cos(angles), radii * np.sin(angles)], 1)
    return pts


class TestPolygonIoU:
    def test_identical_unit_squares(self):
        assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE) == 1.0

    def test_disjoint(self):
        assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE + 5.0) == 0.0

    def test_half_offset(self):
        # intersection 0.5, union 1.5
        assert polygon_iou(UNIT_SQUARE, UNIT_SQUARE + [0.5, 0.0]) == pytest.approx(1 / 3)

    def test_degenerate_rejected(self):
        line = np.array([[0, 0], [1, 0], [2, 0]], dtype=float)
        with pytest.raises(GeometryError):
            polygon_iou(line, UNIT_SQUARE)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = random_simple_polygon(rng)
            b = random_simple_polygon(rng)
            iou = polygon_iou(a, b)
            assert 0.0 <= iou <= 1.0
            assert iou == pytest.approx(polygon_iou(b, a), abs=1e-12)


class TestMaskIoU:
    def test_identity(self):
        m = np.zeros((28, 28), bool)
        m[3:9, 4:15] = True
        assert mask_iou(m, m) == 1.0

    def test_containment_half(self):
        a = np.zeros((28, 28), bool)
        b = np.zeros((28, 28), bool)
        a[0:7, 0:8] = True  # 56 px
        b[0:14, 0:8] = True  # 112 px
        assert mask_iou(a, b) == 0.5

    def test_empty_union(self):
        z = np.zeros((5, 5), bool)
        assert mask_iou(z, z) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(GeometryError):
            mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_matches_pixel_count_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            a = rng.random((28, 28)) > 0.6
            b = rng.random((28, 28)) > 0.6
            inter = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p and q)
            union = sum(1 for p, q in zip(a.ravel(), b.ravel()) if p or q)
            expected = inter / union if union else 0.0
            assert mask_iou(a, b) == expected


class TestGreedyNMS:
    def test_singleton(self):
        assert greedy_nms([UNIT_SQUARE], [0.5], polygon_iou, 0.5) == [0]

    def test_chain_suppression(self):
        boxes = [np.array([0, 0, 2, 2.0]), np.array([0.5, 0, 2.5, 2.0]),
                 np.array([1.0, 0, 3.0, 2.0])]
        keep = greedy_nms(boxes, [3.0, 2.0, 1.0], box_iou_reference, 0.3)
        assert keep == [0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(2, 40))
            xy = rng.uniform(0, 50, size=(n, 2))
            wh = rng.uniform(3, 25, size=(n, 2))
            boxes = np.concatenate([xy, xy + wh], axis=1)
            scores = rng.random(n)
            got = greedy_nms(list(boxes), scores, box_iou_reference, 0.4)
            want = brute_force_nms(list(boxes), scores, box_iou_reference, 0.4)
            assert got == want
            assert box_nms(boxes, scores, 0.4) == want

    def test_box_nms_max_keep_is_prefix(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 40, size=(30, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(2, 20, (30, 2))], axis=1)
        scores = rng.random(30)
        full = box_nms(boxes, scores, 0.5)
        assert box_nms(boxes, scores, 0.5, max_keep=4) == full[:4]

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 20))
        xy = rng.uniform(0, 30, size=(n, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(2, 15, (n, 2))], axis=1)
        scores = rng.uniform(0.01, 1.0, n)
        scores += np.linspace(0, 1e-6, n)  # make scores distinct
        keep = set(box_nms(boxes, scores, 0.4))
        perm = rng.permutation(n)
        keep_p = set(perm[i] for i in box_nms(boxes[perm], scores[perm], 0.4))
        assert keep == keep_p

    def test_survivor_pairs_below_threshold(self):
        rng = np.random.default_rng(13)
        xy = rng.uniform(0, 40, size=(50, 2))
        boxes = np.concatenate([xy, xy + rng.uniform(2, 25, (50, 2))], axis=1)
        scores = rng.random(50)
        keep = box_nms(boxes, scores, 0.45)
        for i, a in enumerate(keep):
            for b in keep[:i]:
                assert box_iou_reference(boxes[a], boxes[b]) <= 0.45


class TestMinAreaRect:
    def test_axis_aligned_rect_fixed_point(self):
        pts = np.array([[0, 0], [4, 0], [4, 2], [0, 2]], dtype=float)
        rect = min_area_rect(pts)
        assert rect.width == pytest.approx(4.0)
        assert rect.height == pytest.approx(2.0)
        assert rect.angle == pytest.approx(0.0, abs=1e-12)
        assert rect.center == pytest.approx((2.0, 1.0))

    def test_rotated_square(self):
        s = math.sqrt(0.5)
        pts = np.array([[0, -s], [s, 0], [0, s], [-s, 0]])
        rect = min_area_rect(pts)
        assert rect.area == pytest.approx(1.0, abs=1e-9)
        assert abs(rect.angle) == pytest.approx(math.pi / 4, abs=1e-9)

    def test_collinear_rejected(self):
        with pytest.raises(GeometryError):
            min_area_rect(np.array([[0, 0], [1, 1], [2, 2.0]]))

    def test_mask_input(self):
        m = np.zeros((10, 10), bool)
        m[2:5, 3:9] = True
        rect = min_area_rect(m)
        assert rect.width == pytest.approx(5.0)
        assert rect.height == pytest.approx(2.0)

    def _angle_sweep_area(self, pts, step_deg=0.1):
        best = np.inf
        for deg in np.arange(0.0, 90.0, step_deg):
            a = math.radians(deg)
            rot = pts @ np.array([[math.cos(a), -math.sin(a)],
                                  [math.sin(a), math.cos(a)]])
            w = rot[:, 0].max() - rot[:, 0].min()
            h = rot[:, 1].max() - rot[:, 1].min()
            best = min(best, w * h)
        return best

    def test_matches_angle_sweep(self):
        # the sweep upper-bounds the optimum; calipers may only beat it by
        # the sweep's own discretization slack
        rng = np.random.default_rng(17)
        for _ in range(10):
            pts = rng.normal(size=(20, 2)) * rng.uniform(1, 5, size=2)
            rect = min_area_rect(pts)
            sweep = self._angle_sweep_area(pts)
            assert rect.area <= sweep * (1 + 1e-9)
            assert rect.area >= sweep * (1 - 1e-2)

    def test_contains_inputs_and_beats_aabb(self):
        rng = np.random.default_rng(19)
        for _ in range(20):
            pts = rng.normal(size=(15, 2)) * [3.0, 1.0]
            rect = min_area_rect(pts)
            aabb = (pts[:, 0].max() - pts[:, 0].min()) * \
                (pts[:, 1].max() - pts[:, 1].min())
            assert rect.area <= aabb + 1e-9
            c, s = math.cos(rect.angle), math.sin(rect.angle)
            rel = pts - np.asarray(rect.center)
            u = rel @ np.array([c, s])
            v = rel @ np.array([-s, c])
            assert np.all(np.abs(u) <= rect.width / 2 + 1e-9)
            assert np.all(np.abs(v) <= rect.height / 2 + 1e-9)


class TestFitPolygon:
    def test_full_mask_gives_box_corners(self):
        poly = fit_polygon(np.ones((28, 28)), (10, 20, 38, 48))
        assert len(poly) == 4
        want = {(10.0, 20.0), (38.0, 20.0), (38.0, 48.0), (10.0, 48.0)}
        assert {tuple(p) for p in poly} == want

    def test_empty_mask_rejected(self):
        with pytest.raises(GeometryError):
            fit_polygon(np.zeros((28, 28)), (0, 0, 28, 28))

    def test_largest_component_wins(self):
        m = np.zeros((28, 28))
        m[2:6, 2:6] = 1  # 16 px blob
        m[10:26, 8:26] = 1  # big blob
        poly = fit_polygon(m, (0, 0, 28, 28))
        assert poly[:, 0].min() >= 8.0
        assert poly[:, 1].min() >= 10.0

    def test_coverage_bounds(self):
        yy, xx = np.mgrid[0:28, 0:28]
        for cx, cy, rx, ry in [(14, 14, 10, 6), (10, 16, 6, 9), (14, 6, 12, 4)]:
            blob = ((((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0)
            poly = fit_polygon(blob.astype(float), (0, 0, 28, 28))
            ras = rasterize_polygon_in_box(poly, (0, 0, 28, 28), (28, 28))
            covered = (ras.astype(bool) & blob).sum() / blob.sum()
            assert covered >= 0.95
            assert signed_area(poly) <= 1.10 * blob.sum()

    def test_vertex_budget(self):
        rng = np.random.default_rng(23)
        m = (rng.random((28, 28)) > 0.45).astype(float)
        poly = fit_polygon(m, (0, 0, 28, 28), n_max=16)
        assert len(poly) <= 16

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_always_simple_and_ccw(self, seed):
        rng = np.random.default_rng(seed)
        m = np.zeros((20, 20))
        for _ in range(int(rng.integers(1, 4))):
            r, c = rng.integers(0, 14, size=2)
            h, w = rng.integers(2, 7, size=2)
            m[r:r + h, c:c + w] = 1
        poly = fit_polygon(m, (0, 0, 20, 20), n_max=16)
        assert signed_area(poly) > 0
        as_polygon(poly)  # raises if not simple


class TestRasterize:
    def test_square_pixel_count(self):
        poly = np.array([[2, 2], [10, 2], [10, 8], [2, 8]], dtype=float)
        m = rasterize_polygon_in_box(poly, (0, 0, 28, 28), (28, 28))
        # pixel centers strictly inside [2, 10) x [2, 8)
        assert m.sum() == 8 * 6

    def test_registered_to_box(self):
        poly = np.array([[0, 0], [28, 0], [28, 28], [0, 28]], dtype=float)
        m = rasterize_polygon_in_box(poly, (0, 0, 28, 28), (14, 14))
        assert m.sum() == 14 * 14


class TestConvexHull:
    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_hull_contains_all_points(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(int(rng.integers(3, 30)), 2))
        try:
            hull = convex_hull(pts)
        except GeometryError:
            return  # collinear draw
        from shapely.geometry import Point, Polygon
        shp = Polygon(hull).buffer(1e-9)
        assert all(shp.contains(Point(p)) for p in pts)
