"""Pixel and box primitives used by every stage.

Images are ``(H, W, C)`` uint8 arrays and masks are ``(H, W)`` bool arrays.
Coordinates put the origin at the top-left corner of the top-left pixel, with
x to the right and y downward; pixel ``(x, y)`` covers ``[x, x+1) x [y, y+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyMask, GeometryError, SingularTransform

Point = tuple[float, float]


@dataclass(frozen=True)
class AxisBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> list[Point]:
        return [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]

    def to_int(self) -> tuple[int, int, int, int]:
        """Integer pixel bounds (floor of mins, ceil of maxes)."""
        return (
            int(math.floor(self.x_min)),
            int(math.floor(self.y_min)),
            int(math.ceil(self.x_max)),
            int(math.ceil(self.y_max)),
        )


@dataclass(frozen=True)
class OrientedBox:
    center_x: float
    center_y: float
    width: float
    height: float
    angle: float  # radians, (-pi/2, pi/2]

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"degenerate oriented box {self}")
        if not (-math.pi / 2 < self.angle <= math.pi / 2):
            raise GeometryError(f"angle {self.angle} outside (-pi/2, pi/2]")

    @classmethod
    def from_axis(cls, box: AxisBox) -> "OrientedBox":
        return cls(
            (box.x_min + box.x_max) / 2,
            (box.y_min + box.y_max) / 2,
            box.width,
            box.height,
            0.0,
        )

    @property
    def area(self) -> float:
        return self.width * self.height

    def corners(self) -> list[Point]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        hw, hh = self.width / 2, self.height / 2
        out = []
        for dx, dy in ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)):
            out.append((self.center_x + c * dx - s * dy, self.center_y + s * dx + c * dy))
        return out


# --- IoU -----------------------------------------------------------------


def iou_axis(a: AxisBox, b: AxisBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon_area(poly: Sequence[Point]) -> float:
    """Signed shoelace area (positive for clockwise on screen, i.e. y-down CCW)."""
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s / 2


def _oriented(poly: Sequence[Point]) -> list[Point]:
    poly = list(poly)
    return poly if polygon_area(poly) >= 0 else poly[::-1]


def clip_convex(subject: Sequence[Point], clipper: Sequence[Point]) -> list[Point]:
    """Sutherland-Hodgman clipping of ``subject`` against convex ``clipper``.

    Both polygons must share orientation (positive signed area).
    """
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p: Point) -> float:
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inputs, output = output, []
        prev = inputs[-1]
        prev_side = side(prev)
        for cur in inputs:
            cur_side = side(cur)
            if cur_side >= 0:
                if prev_side < 0:
                    output.append(_intersect(prev, cur, prev_side, cur_side))
                output.append(cur)
            elif prev_side >= 0:
                output.append(_intersect(prev, cur, prev_side, cur_side))
            prev, prev_side = cur, cur_side
    return output


def _intersect(p: Point, q: Point, sp: float, sq: float) -> Point:
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_iou(a: Sequence[Point], b: Sequence[Point]) -> float:
    """IoU of two convex polygons via exact clipping."""
    a, b = _oriented(a), _oriented(b)
    area_a, area_b = polygon_area(a), polygon_area(b)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = polygon_area(clip_convex(a, b))
    if inter <= 0:
        return 0.0
    union = area_a + area_b - inter
    return min(1.0, max(0.0, inter / union))


def iou_oriented(a: OrientedBox, b: OrientedBox) -> float:
    return polygon_iou(a.corners(), b.corners())


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Monotone-chain hull; returns vertices in positive-area order."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


# --- masks ---------------------------------------------------------------


def tight_box_from_mask(mask: np.ndarray) -> AxisBox:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("mask has no foreground pixels")
    return AxisBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def min_area_rect(mask: np.ndarray) -> OrientedBox:
    """Minimum-area rectangle enclosing every foreground pixel square."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("mask has no foreground pixels")
    # hull vertices can only be corners of the extreme pixels of each row
    m = np.asarray(mask, dtype=bool)
    rows = np.nonzero(m.any(axis=1))[0]
    sub = m[rows]
    left = sub.argmax(axis=1)
    right = m.shape[1] - 1 - sub[:, ::-1].argmax(axis=1)
    corners = np.concatenate([
        np.stack([left, rows], 1), np.stack([left, rows + 1], 1),
        np.stack([right + 1, rows], 1), np.stack([right + 1, rows + 1], 1),
    ])
    hull = convex_hull(corners)
    if len(hull) < 3:
        box = tight_box_from_mask(mask)
        return OrientedBox.from_axis(box)

    best = None
    n = len(hull)
    for i in range(n):
        e = hull[(i + 1) % n] - hull[i]
        length = math.hypot(e[0], e[1])
        if length == 0:
            continue
        u = e / length
        v = np.array([-u[1], u[0]])
        pu = hull @ u
        pv = hull @ v
        w, h = pu.max() - pu.min(), pv.max() - pv.min()
        area = w * h
        if best is None or area < best[0] - 1e-9:
            cu = (pu.max() + pu.min()) / 2
            cv = (pv.max() + pv.min()) / 2
            center = cu * u + cv * v
            best = (area, center, w, h, math.atan2(u[1], u[0]))
    _, center, w, h, angle = best
    # fold to (-pi/2, pi/2]; a quarter turn swaps the side lengths
    while angle > math.pi / 2:
        angle -= math.pi
    while angle <= -math.pi / 2:
        angle += math.pi
    if angle > math.pi / 4:
        angle, w, h = angle - math.pi / 2, h, w
    elif angle <= -math.pi / 4:
        angle, w, h = angle + math.pi / 2, h, w
    return OrientedBox(float(center[0]), float(center[1]), float(w), float(h), float(angle))


# --- affine warping --------------------------------------------------------


@dataclass(frozen=True)
class AffineTransform:
    """Maps source coordinates to destination: ``p' = A @ p + t``."""

    matrix: tuple[tuple[float, float, float], tuple[float, float, float]]

    def __post_init__(self):
        if abs(self.det) < 1e-12:
            raise SingularTransform(f"singular transform {self.matrix}")

    @property
    def det(self) -> float:
        (a, b, _), (c, d, _) = self.matrix
        return a * d - b * c

    @classmethod
    def from_array(cls, m: np.ndarray) -> "AffineTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls((tuple(float(v) for v in m[0]), tuple(float(v) for v in m[1])))

    def as_array(self) -> np.ndarray:
        return np.array(self.matrix, dtype=np.float64)

    def as_3x3(self) -> np.ndarray:
        return np.vstack([self.as_array(), [0.0, 0.0, 1.0]])

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(((1.0, 0.0, 0.0), (0.0, 1.0, 0.0)))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "AffineTransform":
        return cls(((1.0, 0.0, float(dx)), (0.0, 1.0, float(dy))))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None, center: Point = (0.0, 0.0)) -> "AffineTransform":
        sy = sx if sy is None else sy
        cx, cy = center
        return cls(((sx, 0.0, cx - sx * cx), (0.0, sy, cy - sy * cy)))

    @classmethod
    def rotation(cls, degrees: float, center: Point = (0.0, 0.0)) -> "AffineTransform":
        """Rotate by ``degrees`` (clockwise on screen, since y points down)."""
        r = math.radians(degrees)
        c, s = math.cos(r), math.sin(r)
        cx, cy = center
        return cls(((c, -s, cx - c * cx + s * cy), (s, c, cy - s * cx - c * cy)))

    @classmethod
    def hflip(cls, width: float) -> "AffineTransform":
        return cls(((-1.0, 0.0, float(width)), (0.0, 1.0, 0.0)))

    def then(self, other: "AffineTransform") -> "AffineTransform":
        """Apply ``self`` first, then ``other``."""
        return AffineTransform.from_array((other.as_3x3() @ self.as_3x3())[:2])

    def inverse(self) -> "AffineTransform":
        return AffineTransform.from_array(np.linalg.inv(self.as_3x3())[:2])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        m = self.as_array()
        return pts @ m[:, :2].T + m[:, 2]


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-9 else v


def warp_raster(
    img: np.ndarray, mask: np.ndarray, t: AffineTransform
) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    """Resample ``img`` (bilinear) and ``mask`` (nearest) through ``t``.

    The output canvas covers the transformed extent of the input. Returns
    ``(image, mask, origin)`` where ``origin`` is the destination coordinate of
    the output's top-left corner.
    """
    if img.shape[:2] != mask.shape:
        raise GeometryError(f"image {img.shape[:2]} and mask {mask.shape} disagree")
    h, w = mask.shape
    corners = t.apply([(0, 0), (w, 0), (w, h), (0, h)])
    x0 = int(math.floor(_snap(corners[:, 0].min())))
    y0 = int(math.floor(_snap(corners[:, 1].min())))
    x1 = int(math.ceil(_snap(corners[:, 0].max())))
    y1 = int(math.ceil(_snap(corners[:, 1].max())))
    out_w, out_h = max(1, x1 - x0), max(1, y1 - y0)

    inv = t.inverse().as_array()
    u = np.arange(out_w, dtype=np.float64) + 0.5 + x0
    v = np.arange(out_h, dtype=np.float64) + 0.5 + y0
    uu, vv = np.meshgrid(u, v)
    fx = inv[0, 0] * uu + inv[0, 1] * vv + inv[0, 2] - 0.5
    fy = inv[1, 0] * uu + inv[1, 1] * vv + inv[1, 2] - 0.5

    image = img if img.ndim == 3 else img[:, :, None]
    out = _bilinear(image, fx, fy)
    out_img = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        out_img = out_img[:, :, 0]

    nx = np.floor(fx + 0.5).astype(np.int64)
    ny = np.floor(fy + 0.5).astype(np.int64)
    inside = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
    sampled = np.zeros((out_h, out_w), dtype=np.float64)
    sampled[inside] = mask[ny[inside], nx[inside]]
    return out_img, sampled >= 0.5, (x0, y0)


def _bilinear(image: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    # a zero border means clipped taps read zeros, i.e. black outside the source
    h, w, c = image.shape
    src = np.zeros((h + 2, w + 2, c), dtype=np.float64)
    src[1:-1, 1:-1] = image
    flat = src.reshape(-1, c)
    x0 = np.floor(fx)
    y0 = np.floor(fy)
    wx = (fx - x0)[..., None]
    wy = (fy - y0)[..., None]
    xa = np.clip(x0.astype(np.int64) + 1, 0, w + 1)
    xb = np.clip(x0.astype(np.int64) + 2, 0, w + 1)
    ya = np.clip(y0.astype(np.int64) + 1, 0, h + 1) * (w + 2)
    yb = np.clip(y0.astype(np.int64) + 2, 0, h + 1) * (w + 2)
    top = flat[ya + xa] * (1 - wx) + flat[ya + xb] * wx
    bottom = flat[yb + xa] * (1 - wx) + flat[yb + xb] * wx
    return top * (1 - wy) + bottom * wy


def mask_centroid(mask: np.ndarray) -> Point:
    """Centroid of foreground pixel centers."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EmptyMask("mask has no foreground pixels")
    return float(xs.mean() + 0.5), float(ys.mean() + 0.5)
