"""A tiny procedural aerial-pasture dataset for tests and demos.

Grass is blurred colour noise; animals are rotated ellipses with a head
blob, drawn in dark, brown or pale coats. Some animals are packed into
clusters so that their boxes touch or overlap.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset_io import Label, LabelSet, write_image, write_labels, write_mask, write_text
from .geometry import AxisBox, tight_box_from_mask

COATS = ((35, 30, 28), (110, 70, 40), (215, 205, 190), (70, 45, 30))


def _grass(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    base = np.array([78, 112, 52], dtype=np.float64)
    noise = rng.normal(0, 1, (height, width, 3))
    coarse = ndimage.gaussian_filter(rng.normal(0, 1, (height // 8, width // 8)), 3)
    coarse = np.kron(coarse, np.ones((8, 8)))[:height, :width]
    img = base + 10 * noise + 40 * coarse[:, :, None] * np.array([0.6, 1.0, 0.4])
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _animal_mask(width: int, height: int, cx: float, cy: float, length: float, girth: float,
                 angle: float) -> np.ndarray:
    m = np.zeros((height, width), bool)
    r = int(length) + 2
    x0, x1 = max(int(cx) - r, 0), min(int(cx) + r, width)
    y0, y1 = max(int(cy) - r, 0), min(int(cy) + r, height)
    yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
    c, s = math.cos(angle), math.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    body = (u / (length / 2)) ** 2 + (v / (girth / 2)) ** 2 <= 1
    hx, hy = cx + c * length * 0.55, cy + s * length * 0.55
    head = (xx - hx) ** 2 + (yy - hy) ** 2 <= (girth * 0.32) ** 2
    m[y0:y1, x0:x1] = body | head
    return m


def make_image(seed: int, width: int = 1280, height: int = 960, n_single: int = 4,
               cluster_size: int = 3):
    """One pasture image plus a full-size mask per animal."""
    rng = np.random.default_rng(seed)
    img = _grass(rng, width, height)
    masks: list[np.ndarray] = []
    centers = []
    for _ in range(n_single):
        centers.append((rng.uniform(120, width - 120), rng.uniform(120, height - 120)))
    cx, cy = rng.uniform(250, width - 250), rng.uniform(200, height - 200)
    for k in range(cluster_size):
        a = 2 * math.pi * k / cluster_size
        centers.append((cx + 55 * math.cos(a), cy + 45 * math.sin(a)))
    occupied = np.zeros((height, width), bool)
    for x, y in centers:
        length = rng.uniform(80, 130)
        girth = length * rng.uniform(0.42, 0.55)
        m = _animal_mask(width, height, x, y, length, girth, rng.uniform(0, 2 * math.pi))
        m &= ~occupied
        if m.sum() < 200:
            continue
        coat = np.array(COATS[int(rng.integers(len(COATS)))], dtype=np.float64)
        shade = coat + rng.normal(0, 6, (int(m.sum()), 3))
        img[m] = np.clip(np.rint(shade), 0, 255).astype(np.uint8)
        occupied |= m
        masks.append(m)
    return img, masks


def annotation_box(mask: np.ndarray, margin: int) -> AxisBox:
    """Tight box grown by ``margin`` pixels and clipped, like a hand-drawn label."""
    x0, y0, x1, y1 = tight_box_from_mask(mask).to_int()
    h, w = mask.shape
    return AxisBox(max(x0 - margin, 0), max(y0 - margin, 0), min(x1 + margin, w), min(y1 + margin, h))


def write_fixture(root: str | Path, count: int = 5, seed: int = 2024, width: int = 1280,
                  height: int = 960, masks_for: int = 1, margin: int = 4) -> list[str]:
    """Write ``images/``, ``labels/`` and, for the first ``masks_for`` images, ``masks/``."""
    root = Path(root)
    stems = []
    for i in range(count):
        stem = f"pasture_{i:02d}"
        img, masks = make_image(seed + i, width, height)
        boxes = [annotation_box(m, margin) for m in masks]
        labels = LabelSet(tuple(Label(0, b, normalized=False).to_normalized(width, height) for b in boxes))
        write_image(root / "images" / f"{stem}.png", img)
        write_text(root / "labels" / f"{stem}.txt", write_labels(labels))
        if i < masks_for:
            for j, (m, b) in enumerate(zip(masks, boxes)):
                x0, y0, x1, y1 = b.to_int()
                write_mask(root / "masks" / f"{stem}_{j}_mask.png", m[y0:y1, x0:x1])
        stems.append(stem)
    return stems
