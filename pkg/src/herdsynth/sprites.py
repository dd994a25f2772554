"""Cutting annotated animals out of source images.

A sprite starts life as its box crop with an all-foreground mask. The mask is
then replaced by an externally produced one (``import_mask``) or estimated by
the colour-outlier segmenter in ``baseline_segment``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy import ndimage

from .dataset_io import LabelSet
from .errors import BoxOutOfBounds, MaskShapeError, MaskTooSmall, SegmentationEmpty
from .geometry import AxisBox

MIN_FOREGROUND_PIXELS = 25
_STRUCT3 = np.ones((3, 3), bool)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TransformRecord:
    op: str
    params: dict[str, Any] = field(default_factory=dict)
    geometric: bool = False


@dataclass(frozen=True, eq=False)
class Sprite:
    patch: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) bool, True = animal
    source_image: str
    source_box: AxisBox
    transform_log: tuple[TransformRecord, ...] = ()
    mask_source: str = "box"

    def __post_init__(self):
        if self.patch.ndim != 3 or self.patch.shape[2] != 3:
            raise MaskShapeError(f"patch must be (h, w, 3), got {self.patch.shape}")
        if self.patch.shape[:2] != self.mask.shape:
            raise MaskShapeError(f"patch {self.patch.shape[:2]} vs mask {self.mask.shape}")
        object.__setattr__(self, "patch", _frozen(self.patch.astype(np.uint8, copy=False)))
        object.__setattr__(self, "mask", _frozen(self.mask.astype(bool, copy=False)))

    @property
    def foreground(self) -> int:
        return int(self.mask.sum())

    def logged(self, record: TransformRecord, **changes) -> "Sprite":
        return replace(self, transform_log=self.transform_log + (record,), **changes)

    def same_pixels(self, other: "Sprite") -> bool:
        return np.array_equal(self.patch, other.patch) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True, eq=False)
class MaskedScene:
    background: np.ndarray  # (H, W, 3) uint8 with holes zeroed
    holes: tuple[tuple[int, int, int, int], ...]  # integer (x0, y0, x1, y1)
    source_image: str

    def hole_mask(self) -> np.ndarray:
        m = np.zeros(self.background.shape[:2], bool)
        for x0, y0, x1, y1 in self.holes:
            m[y0:y1, x0:x1] = True
        return m


def _snap(v: float) -> float:
    # absorbs the rounding of 6-decimal normalized labels on large images
    r = round(v)
    return r if abs(v - r) < 1e-2 else v


def pixel_bounds(box: AxisBox) -> tuple[int, int, int, int]:
    """Integer pixel extent covering ``box``."""
    return (
        int(math.floor(_snap(box.x_min))),
        int(math.floor(_snap(box.y_min))),
        int(math.ceil(_snap(box.x_max))),
        int(math.ceil(_snap(box.y_max))),
    )


def extract_sprites(img: np.ndarray, labels: LabelSet, image_id: str = "") -> tuple[list[Sprite], MaskedScene]:
    h, w = img.shape[:2]
    labels = labels.to_pixels(w, h)
    holes = []
    for i, lab in enumerate(labels):
        if not isinstance(lab.box, AxisBox):
            raise TypeError("sprite extraction needs axis-aligned boxes")
        x0, y0, x1, y1 = pixel_bounds(lab.box)
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h or x1 <= x0 or y1 <= y0:
            raise BoxOutOfBounds(i, lab.box)
        holes.append((x0, y0, x1, y1))

    sprites = []
    for x0, y0, x1, y1 in holes:
        patch = img[y0:y1, x0:x1]
        sprites.append(Sprite(patch, np.ones(patch.shape[:2], bool), image_id,
                              AxisBox(x0, y0, x1, y1)))
    background = img.copy()
    for x0, y0, x1, y1 in holes:
        background[y0:y1, x0:x1] = 0
    return sprites, MaskedScene(_frozen(background), tuple(holes), image_id)


def paste_back(background: np.ndarray, sprites: list[Sprite]) -> np.ndarray:
    """Write every sprite patch back at its source box."""
    out = background.copy()
    for s in sprites:
        x0, y0, x1, y1 = pixel_bounds(s.source_box)
        out[y0:y1, x0:x1] = s.patch
    return out


def import_mask(sprite: Sprite, mask: np.ndarray, min_foreground: int = MIN_FOREGROUND_PIXELS) -> Sprite:
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[:, :, 0]
    if mask.shape != sprite.mask.shape:
        raise MaskShapeError(f"mask {mask.shape} does not match patch {sprite.mask.shape}")
    if mask.dtype != bool:
        mask = mask >= 128
    if int(mask.sum()) < min_foreground:
        raise MaskTooSmall(f"mask has {int(mask.sum())} foreground pixels, need {min_foreground}")
    return replace(sprite, mask=mask, mask_source="imported")


def largest_component(fg: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected component (lowest label wins ties)."""
    labels, n = ndimage.label(fg)
    if n == 0:
        return np.zeros_like(fg, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def clean_mask(fg: np.ndarray) -> np.ndarray:
    """3x3 opening then closing, then the largest component."""
    fg = ndimage.binary_opening(fg, structure=_STRUCT3)
    # pad so closing does not erode shapes touching the patch edge
    padded = np.pad(fg, 1, mode="edge")
    fg = ndimage.binary_closing(padded, structure=_STRUCT3)[1:-1, 1:-1]
    return largest_component(fg)


def ring_mask(shape: tuple[int, int], width: int) -> np.ndarray:
    ring = np.ones(shape, bool)
    ring[width:shape[0] - width, width:shape[1] - width] = False
    return ring


def mahalanobis_foreground(patch: np.ndarray, border_ring: int, tau: float) -> np.ndarray:
    pix = patch.astype(np.float64).reshape(-1, patch.shape[2])
    ring = pix[ring_mask(patch.shape[:2], border_ring).ravel()]
    mu = ring.mean(axis=0)
    cov = np.atleast_2d(np.cov(ring, rowvar=False, bias=True))
    eig = np.linalg.eigvalsh(cov)
    if not np.all(np.isfinite(eig)) or eig.min() <= 1e-6 * max(1.0, eig.max()):
        cov = np.diag(np.maximum(np.diag(cov), 1.0))
    diff = pix - mu
    d2 = np.einsum("ij,jk,ik->i", diff, np.linalg.inv(cov), diff)
    return (np.sqrt(np.maximum(d2, 0.0)) > tau).reshape(patch.shape[:2])


def baseline_segment(sprite: Sprite, border_ring: int = 2, tau: float = 3.0,
                     min_foreground: int = MIN_FOREGROUND_PIXELS) -> Sprite:
    """Colour-outlier segmentation against a background model from the patch rim."""
    h, w = sprite.mask.shape
    if border_ring < 1 or border_ring >= min(h, w) / 2:
        raise ValueError(f"border_ring {border_ring} invalid for {w}x{h} patch")
    fg = clean_mask(mahalanobis_foreground(sprite.patch, border_ring, tau))
    count = int(fg.sum())
    if count == 0:
        raise SegmentationEmpty(f"no foreground found in {sprite.source_image} {sprite.source_box}")
    if count < min_foreground:
        raise MaskTooSmall(f"segmented {count} pixels, need {min_foreground}")
    return replace(sprite, mask=fg, mask_source="baseline")
