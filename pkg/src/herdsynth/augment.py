"""Pose and lighting augmentation of sprites: mirror, contrast, small tilt."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngleOutOfRange
from .geometry import AffineTransform, warp_raster
from .sprites import Sprite, TransformRecord

ROTATION_RANGE = (10.0, 20.0)


@dataclass(frozen=True)
class AugmentationSpec:
    flip: bool = False
    contrast_factor: float = 1.0
    rotation_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.contrast_factor <= 0:
            raise ValueError("contrast_factor must be positive")
        _check_angle(self.rotation_deg)


def _check_angle(degrees: float) -> None:
    lo, hi = ROTATION_RANGE
    if degrees != 0 and not lo <= abs(degrees) <= hi:
        raise AngleOutOfRange(f"|{degrees}| deg outside [{lo}, {hi}]")


def sample_spec(seed: int, contrast_range=(0.7, 1.3), p_flip: float = 0.5,
                p_contrast: float = 1.0, p_rotate: float = 1.0,
                rotation_range=ROTATION_RANGE) -> AugmentationSpec:
    rng = np.random.default_rng(seed)
    flip = bool(rng.random() < p_flip)
    factor = float(rng.uniform(*contrast_range)) if rng.random() < p_contrast else 1.0
    if rng.random() < p_rotate:
        sign = 1.0 if rng.random() < 0.5 else -1.0
        angle = sign * float(rng.uniform(*rotation_range))
    else:
        angle = 0.0
    return AugmentationSpec(flip, factor, angle, seed)


def hflip(sprite: Sprite) -> Sprite:
    w = sprite.mask.shape[1]
    record = TransformRecord("hflip", {"matrix": AffineTransform.hflip(w).matrix}, geometric=True)
    return sprite.logged(record, patch=sprite.patch[:, ::-1], mask=sprite.mask[:, ::-1])


def adjust_contrast(sprite: Sprite, factor: float) -> Sprite:
    """Stretch foreground intensities about their per-channel mean."""
    if factor < 0:
        raise ValueError("contrast factor must be non-negative")
    patch = sprite.patch.astype(np.float64)
    fg = sprite.mask
    out = np.array(sprite.patch, copy=True)
    if fg.any():
        mu = patch[fg].mean(axis=0)
        stretched = mu + factor * (patch[fg] - mu)
        out[fg] = np.clip(np.rint(stretched), 0, 255).astype(np.uint8)
    record = TransformRecord("contrast", {"factor": float(factor)})
    return sprite.logged(record, patch=out)


def rotate_sprite(sprite: Sprite, degrees: float) -> Sprite:
    """Rotate about the patch centre; the canvas grows to hold the result."""
    _check_angle(degrees)
    if degrees == 0:
        return sprite
    h, w = sprite.mask.shape
    t = AffineTransform.rotation(degrees, center=(w / 2, h / 2))
    patch, mask, origin = warp_raster(sprite.patch, sprite.mask, t)
    record = TransformRecord("rotate", {"degrees": float(degrees), "matrix": t.matrix,
                                        "origin": origin}, geometric=True)
    return sprite.logged(record, patch=patch, mask=mask)


def apply_spec(sprite: Sprite, spec: AugmentationSpec) -> Sprite:
    """Flip, then contrast, then rotation. Identity steps are skipped."""
    out = sprite
    if spec.flip:
        out = hflip(out)
    if spec.contrast_factor != 1.0:
        out = adjust_contrast(out, spec.contrast_factor)
    if spec.rotation_deg != 0:
        out = rotate_sprite(out, spec.rotation_deg)
    return out
