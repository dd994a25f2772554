"""Refilling zeroed animal boxes so the scene can be reused as a backdrop.

Each connected hole region is filled with pixels drawn uniformly from the
ring of intact pixels around it, then the region (grown by the kernel radius)
is softened with a separable Gaussian blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoBorderAvailable
from .sprites import MaskedScene

_EIGHT = np.ones((3, 3), bool)


@dataclass(frozen=True, eq=False)
class FilledBackground:
    image: np.ndarray
    filled_regions: tuple[np.ndarray, ...]  # each (n, 2) array of (y, x)
    source_image: str
    fill_seed: int

    def region_mask(self, dilate: int = 0) -> np.ndarray:
        m = np.zeros(self.image.shape[:2], bool)
        for r in self.filled_regions:
            m[r[:, 0], r[:, 1]] = True
        if dilate > 0 and m.any():
            m = ndimage.binary_dilation(m, structure=_EIGHT, iterations=dilate)
        return m


def find_connected_regions(scene: MaskedScene) -> list[np.ndarray]:
    """4-connected components of the hole pixels, in raster order of first pixel."""
    labels, n = ndimage.label(scene.hole_mask())
    if n == 0:
        return []
    order = np.argsort(labels.ravel(), kind="stable")
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    flat = np.split(order[counts[0]:], np.cumsum(counts[1:])[:-1])
    w = labels.shape[1]
    return [np.stack(np.divmod(f, w), axis=1) for f in flat]


def _crop(region: np.ndarray, margin: int, shape) -> tuple[slice, slice]:
    y0, x0 = region.min(axis=0) - margin
    y1, x1 = region.max(axis=0) + margin + 1
    return (slice(max(y0, 0), min(y1, shape[0])), slice(max(x0, 0), min(x1, shape[1])))


def border_pixels(hole: np.ndarray, region: np.ndarray, width: int = 1) -> np.ndarray:
    """Intact pixels within ``width`` steps (8-neighbourhood) of ``region``, as (y, x)."""
    sy, sx = _crop(region, width, hole.shape)
    local = np.zeros((sy.stop - sy.start, sx.stop - sx.start), bool)
    local[region[:, 0] - sy.start, region[:, 1] - sx.start] = True
    grown = ndimage.binary_dilation(local, structure=_EIGHT, iterations=width)
    ring = grown & ~hole[sy, sx]
    ys, xs = np.nonzero(ring)
    return np.stack([ys + sy.start, xs + sx.start], axis=1)


def fill_from_borders(scene: MaskedScene, regions: list[np.ndarray], seed: int,
                      border_width: int = 1) -> FilledBackground:
    hole = scene.hole_mask()
    out = np.array(scene.background, copy=True)
    for i, region in enumerate(regions):
        ring = border_pixels(hole, region, border_width)
        if len(ring) == 0:
            raise NoBorderAvailable(f"region {i} of {scene.source_image} has no intact border")
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        picks = rng.integers(0, len(ring), size=len(region))
        src = ring[picks]
        out[region[:, 0], region[:, 1]] = scene.background[src[:, 0], src[:, 1]]
    return FilledBackground(out, tuple(regions), scene.source_image, seed)


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    k = gaussian_kernel(sigma, radius)
    f = img.astype(np.float64)
    f = ndimage.correlate1d(f, k, axis=0, mode="reflect")
    f = ndimage.correlate1d(f, k, axis=1, mode="reflect")
    return f


def blur_regions(bg: FilledBackground, sigma: float = 2.0, kernel_radius: int = 6) -> FilledBackground:
    """Blur each filled region grown by ``kernel_radius``; other pixels are untouched."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if kernel_radius < math.ceil(3 * sigma):
        raise ValueError(f"kernel_radius {kernel_radius} < ceil(3*sigma)")
    src = bg.image
    out = np.array(src, copy=True)
    shape = src.shape[:2]
    for region in bg.filled_regions:
        # crop large enough that interior crop edges never feed the blur
        sy, sx = _crop(region, 2 * kernel_radius, shape)
        local = np.zeros((sy.stop - sy.start, sx.stop - sx.start), bool)
        local[region[:, 0] - sy.start, region[:, 1] - sx.start] = True
        target = ndimage.binary_dilation(local, structure=_EIGHT, iterations=kernel_radius)
        blurred = gaussian_blur(src[sy, sx], sigma, kernel_radius)
        blurred = np.clip(np.rint(blurred), 0, 255).astype(src.dtype)
        out[sy, sx][target] = blurred[target]
    return FilledBackground(out, bg.filled_regions, bg.source_image, bg.fill_seed)


def recreate_background(scene: MaskedScene, seed: int, border_width: int = 1,
                        sigma: float = 2.0, kernel_radius: int = 6) -> FilledBackground:
    regions = find_connected_regions(scene)
    filled = fill_from_borders(scene, regions, seed, border_width)
    return blur_regions(filled, sigma, kernel_radius)
