import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdsynth.errors import EmptyMask, SingularTransform
from herdsynth.geometry import (
    AffineTransform,
    AxisBox,
    OrientedBox,
    iou_axis,
    iou_oriented,
    min_area_rect,
    polygon_area,
    tight_box_from_mask,
    warp_raster,
)
from oracles import monte_carlo_iou, pixel_iou, points_in_convex, scan_box


def test_iou_axis_examples():
    a = AxisBox(0, 0, 10, 10)
    assert iou_axis(a, a) == 1.0
    assert iou_axis(a, AxisBox(20, 20, 30, 30)) == 0.0
    b = AxisBox(5, 0, 15, 10)
    expected = pixel_iou((0, 0, 10, 10), (5, 0, 15, 10))
    assert expected == pytest.approx(1 / 3)
    assert iou_axis(a, b) == pytest.approx(expected, abs=1e-12)


int_boxes = st.tuples(
    st.integers(0, 30), st.integers(0, 30), st.integers(1, 20), st.integers(1, 20)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(int_boxes, int_boxes)
@settings(max_examples=150, deadline=None)
def test_iou_axis_matches_pixel_count_and_symmetric(a, b):
    ba, bb = AxisBox(*a), AxisBox(*b)
    assert iou_axis(ba, bb) == pytest.approx(pixel_iou(a, b), abs=1e-12)
    assert iou_axis(ba, bb) == iou_axis(bb, ba)


@given(int_boxes, int_boxes)
@settings(max_examples=150, deadline=None)
def test_oriented_at_zero_angle_equals_axis(a, b):
    ba, bb = AxisBox(*a), AxisBox(*b)
    oa, ob = OrientedBox.from_axis(ba), OrientedBox.from_axis(bb)
    assert abs(iou_oriented(oa, ob) - iou_axis(ba, bb)) < 1e-9
    assert iou_oriented(oa, ob) == pytest.approx(iou_oriented(ob, oa), abs=1e-12)


def test_iou_oriented_examples():
    sq = OrientedBox(0, 0, 1, 1, 0.0)
    assert iou_oriented(sq, sq) == pytest.approx(1.0)
    rot = OrientedBox(0, 0, 1, 1, math.pi / 4)
    mc = monte_carlo_iou(sq.corners(), rot.corners(), samples=1_000_000, seed=3)
    exact = iou_oriented(sq, rot)
    assert exact == pytest.approx(0.7071, abs=0.002)
    assert exact == pytest.approx(mc, abs=0.002)
    far = OrientedBox(100, 0, 10, 10, 0.3)
    assert iou_oriented(OrientedBox(0, 0, 10, 10, 0.1), far) == 0.0


def test_oriented_box_corners_form_convex_quad():
    box = OrientedBox(5, 5, 4, 2, 0.7)
    corners = box.corners()
    assert polygon_area(corners) == pytest.approx(8.0)
    with pytest.raises(ValueError):
        OrientedBox(0, 0, 0, 1, 0)
    with pytest.raises(ValueError):
        OrientedBox(0, 0, 1, 1, -math.pi / 2)


def test_tight_box_examples():
    m = np.zeros((10, 10), bool)
    m[7, 3] = True
    assert tight_box_from_mask(m) == AxisBox(3, 7, 4, 8)
    full = np.ones((6, 9), bool)
    assert tight_box_from_mask(full) == AxisBox(0, 0, 9, 6)
    ell = np.zeros((12, 8), bool)
    ell[2:10, 1:3] = True
    ell[8:10, 1:6] = True
    assert tight_box_from_mask(ell) == AxisBox(*scan_box(ell))
    assert tight_box_from_mask(ell) == AxisBox(1, 2, 6, 10)
    with pytest.raises(EmptyMask):
        tight_box_from_mask(np.zeros((3, 3), bool))


@given(st.lists(st.tuples(st.integers(0, 14), st.integers(0, 14)), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_tight_box_is_minimal(points):
    m = np.zeros((15, 15), bool)
    for x, y in points:
        m[y, x] = True
    box = tight_box_from_mask(m)
    assert box == AxisBox(*scan_box(m))
    x0, y0, x1, y1 = box.to_int()
    assert m[y0:y1, x0:x1].sum() == m.sum()
    # shrinking any side loses a foreground pixel
    assert m[y0:y1, x0 + 1:x1].sum() < m.sum() or x1 - x0 == 0
    assert m[y0:y1, x0:x1 - 1].sum() < m.sum()
    assert m[y0 + 1:y1, x0:x1].sum() < m.sum()
    assert m[y0:y1 - 1, x0:x1].sum() < m.sum()


def test_min_area_rect_contains_mask_and_beats_axis_box():
    m = np.zeros((80, 80), bool)
    yy, xx = np.mgrid[0:80, 0:80]
    # thin diagonal bar
    m[np.abs((xx - yy)) < 4] = True
    m[(xx < 10) | (xx > 70)] = False
    rect = min_area_rect(m)
    assert rect.area < tight_box_from_mask(m).area * 0.5
    ys, xs = np.nonzero(m)
    centers = np.stack([xs + 0.5, ys + 0.5], axis=1)
    assert points_in_convex(centers, rect.corners()).all()
    assert -math.pi / 2 < rect.angle <= math.pi / 2


def test_min_area_rect_of_axis_rectangle():
    m = np.zeros((20, 30), bool)
    m[4:9, 3:21] = True
    rect = min_area_rect(m)
    assert rect.area == pytest.approx(5 * 18)
    assert rect.center_x == pytest.approx(12.0)
    assert rect.center_y == pytest.approx(6.5)


def _random_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (h, w, 3), dtype=np.uint8)


def test_warp_identity_is_identity():
    img = _random_image(13, 17)
    mask = np.random.default_rng(1).random((13, 17)) > 0.5
    out, omask, origin = warp_raster(img, mask, AffineTransform.identity())
    assert origin == (0, 0)
    assert np.array_equal(out, img)
    assert np.array_equal(omask, mask)


def test_warp_integer_translation_shifts_exactly():
    img = _random_image(10, 12, seed=2)
    mask = np.ones((10, 12), bool)
    out, omask, origin = warp_raster(img, mask, AffineTransform.translation(3, -5))
    assert origin == (3, -5)
    assert np.array_equal(out, img)
    assert omask.all()


def test_warp_rotation_preserves_foreground_count():
    mask = np.zeros((60, 80), bool)
    yy, xx = np.mgrid[0:60, 0:80]
    mask[((xx - 40) / 30) ** 2 + ((yy - 30) / 18) ** 2 <= 1] = True
    img = np.full((60, 80, 3), 100, np.uint8)
    t = AffineTransform.rotation(15, center=(40, 30))
    _, omask, _ = warp_raster(img, mask, t)
    assert abs(int(omask.sum()) - int(mask.sum())) <= 0.02 * mask.sum()


def test_warp_rejects_singular():
    with pytest.raises(SingularTransform):
        AffineTransform(((1.0, 2.0, 0.0), (2.0, 4.0, 0.0)))


def test_transform_composition_and_inverse():
    t = AffineTransform.rotation(30, (5, 5)).then(AffineTransform.scaling(2.0))
    pts = np.array([[1.0, 2.0], [7.0, -3.0]])
    back = t.inverse().apply(t.apply(pts))
    assert np.allclose(back, pts)
    flip = AffineTransform.hflip(10)
    assert np.allclose(flip.apply([[0.5, 3]]), [[9.5, 3]])
