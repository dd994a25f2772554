"""Planning and rendering synthetic herd scenes.

A plan fixes, per animal, the sprite, target size, orientation and anchor
(where the mask centroid lands). Rendering walks the placements from nearest
to farthest: a nearer animal is never moved, and a farther one whose visible
fraction breaks the occlusion band has its anchor redrawn, and is dropped if
that keeps failing.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .background import FilledBackground
from .dataset_io import Label, LabelSet, Quad, write_image, write_labels, write_text
from .errors import EmptyMask, SceneInfeasible, SceneRejected
from .geometry import AffineTransform, mask_centroid, min_area_rect, tight_box_from_mask, warp_raster
from .seeding import STREAM_COMPOSE, derive_seed, rng_for
from .sprites import MIN_FOREGROUND_PIXELS, Sprite

log = logging.getLogger(__name__)

PATTERNS = ("group", "individual")
_EIGHT = np.ones((3, 3), bool)


@dataclass(frozen=True)
class ScaleField:
    name: str
    lo: float
    hi: float
    jitter: float = 0.05

    def __post_init__(self):
        if not 0 < self.lo < self.hi:
            raise ValueError(f"bad scale range for {self.name}: [{self.lo}, {self.hi}]")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")

    @property
    def min_scale(self) -> float:
        return self.lo * (1 - self.jitter)

    @property
    def max_scale(self) -> float:
        return self.hi * (1 + self.jitter)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.lo, self.hi) * (1 + rng.uniform(-self.jitter, self.jitter)))


DEFAULT_FIELDS = (
    ScaleField("near", 450, 500),
    ScaleField("mid", 300, 350),
    ScaleField("far", 180, 200),
)


@dataclass(frozen=True)
class ComposerConfig:
    fields: tuple[ScaleField, ...] = DEFAULT_FIELDS
    field_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    group_size: tuple[int, int] = (6, 10)
    individual_size: tuple[int, int] = (1, 5)
    distance_range: tuple[float, float] = (0.6, 1.5)
    min_visibility: float = 0.10
    max_occluded_visibility: float = 0.90
    max_repair_attempts: int = 20
    min_foreground: int = MIN_FOREGROUND_PIXELS
    group_fraction: float = 0.7
    feather: bool = True

    def __post_init__(self):
        if len(self.field_weights) != len(self.fields) or min(self.field_weights) < 0:
            raise ValueError("need one nonnegative weight per scale field")
        if not 0 <= self.min_visibility <= self.max_occluded_visibility < 1:
            raise ValueError("visibility band must satisfy 0 <= min <= max < 1")
        for lo, hi in (self.group_size, self.individual_size, self.distance_range):
            if not 0 < lo <= hi:
                raise ValueError(f"bad range ({lo}, {hi})")
        if not 0 <= self.group_fraction <= 1:
            raise ValueError("group_fraction must be in [0, 1]")

    def field(self, name: str) -> ScaleField:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)


@dataclass(frozen=True)
class Placement:
    sprite_id: int
    anchor: tuple[float, float]
    scale: float
    orientation: float
    depth_rank: int
    field: str


@dataclass(frozen=True)
class ScenePlan:
    background_id: str
    pattern: str
    placements: tuple[Placement, ...]
    seed: int
    width: int
    height: int
    min_visibility: float = 0.10
    max_occluded_visibility: float = 0.90

    def to_json(self) -> str:
        d = asdict(self)
        d["placements"] = [dict(asdict(p), anchor=list(p.anchor)) for p in self.placements]
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ScenePlan":
        d = json.loads(text)
        d["placements"] = tuple(Placement(**dict(p, anchor=tuple(p["anchor"]))) for p in d["placements"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Layer:
    """One rendered animal: its on-canvas mask crop and the visible part of it."""

    index: int
    origin: tuple[int, int]  # (x, y) of the crop's top-left on the canvas
    mask: np.ndarray
    visible: np.ndarray
    pixels: np.ndarray

    def full(self, shape: tuple[int, int], visible: bool = False) -> np.ndarray:
        out = np.zeros(shape, bool)
        x, y = self.origin
        m = self.visible if visible else self.mask
        out[y:y + m.shape[0], x:x + m.shape[1]] = m
        return out


@dataclass(frozen=True, eq=False)
class CompositeScene:
    image: np.ndarray
    labels: LabelSet  # normalized axis boxes
    obb_labels: LabelSet  # normalized quads
    visibility: tuple[float, ...]
    plan: ScenePlan  # anchors reflect any repairs
    layers: tuple[Layer, ...]  # nearest first, aligned with labels
    dropped: tuple[tuple[int, str], ...] = ()


# --- planning ----------------------------------------------------------------


def _eligible(cfg: ComposerConfig, width: int, height: int) -> tuple[list[ScaleField], np.ndarray]:
    side = min(width, height)
    pairs = [(f, w) for f, w in zip(cfg.fields, cfg.field_weights) if f.max_scale <= side and w > 0]
    if not pairs:
        raise SceneInfeasible(f"background {width}x{height} too small for every scale field")
    w = np.array([p[1] for p in pairs], dtype=np.float64)
    return [p[0] for p in pairs], w / w.sum()


def _uniform_anchor(rng, width: int, height: int, margin: float) -> tuple[float, float]:
    mx = min(margin, width / 2)
    my = min(margin, height / 2)
    return float(rng.uniform(mx, width - mx)), float(rng.uniform(my, height - my))


def _inside(p, width, height) -> bool:
    return 0 <= p[0] < width and 0 <= p[1] < height


def _near_anchor(rng, bases, spacing, cfg, width, height, tries: int = 50):
    """A point at a sampled distance from a random existing anchor."""
    p = bases[0]
    for _ in range(tries):
        base = bases[int(rng.integers(len(bases)))]
        d = rng.uniform(*cfg.distance_range) * spacing
        a = rng.uniform(0, 2 * math.pi)
        p = (base[0] + d * math.cos(a), base[1] + d * math.sin(a))
        if _inside(p, width, height):
            return float(p[0]), float(p[1])
    return float(np.clip(p[0], 0, width - 1)), float(np.clip(p[1], 0, height - 1))


def plan_scene(bg: FilledBackground | tuple[int, int], bank_size: int, pattern: str, seed: int,
               cfg: ComposerConfig = ComposerConfig(), background_id: str | None = None) -> ScenePlan:
    if bank_size < 1:
        raise ValueError("sprite bank is empty")
    if pattern not in PATTERNS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if isinstance(bg, FilledBackground):
        height, width = bg.image.shape[:2]
        background_id = bg.source_image if background_id is None else background_id
    else:
        width, height = bg
    fields, probs = _eligible(cfg, width, height)
    rng = rng_for(seed, 0)

    if pattern == "group":
        n = int(rng.integers(cfg.group_size[0], cfg.group_size[1] + 1))
        f = fields[int(rng.choice(len(fields), p=probs))]
        names = [f.name] * n
        scales = [f.sample(rng) for _ in range(n)]
        spacing = float(np.mean(scales))
        anchors = [_uniform_anchor(rng, width, height, spacing / 2)]
        while len(anchors) < n:
            anchors.append(_near_anchor(rng, anchors, spacing, cfg, width, height))
    else:
        n = int(rng.integers(cfg.individual_size[0], cfg.individual_size[1] + 1))
        names, scales, anchors = [], [], []
        for _ in range(n):
            f = fields[int(rng.choice(len(fields), p=probs))]
            s = f.sample(rng)
            names.append(f.name)
            scales.append(s)
            anchors.append(_uniform_anchor(rng, width, height, s / 2))

    orient = rng.uniform(0, 360, size=n)
    sprite_ids = rng.integers(0, bank_size, size=n)
    order = sorted(range(n), key=lambda i: (-scales[i], i))
    rank = {i: k for k, i in enumerate(order)}
    placements = tuple(
        Placement(int(sprite_ids[i]), anchors[i], float(scales[i]), float(orient[i]), rank[i], names[i])
        for i in range(n)
    )
    return ScenePlan(background_id or "", pattern, placements, int(seed), width, height,
                     cfg.min_visibility, cfg.max_occluded_visibility)


# --- rendering ---------------------------------------------------------------


def compute_visibility(mask: np.ndarray, nearer: np.ndarray) -> float:
    """Fraction of ``mask`` foreground not covered by ``nearer``."""
    if mask.shape != nearer.shape:
        raise ValueError(f"mask {mask.shape} and occluder {nearer.shape} differ")
    total = int(np.count_nonzero(mask))
    if total == 0:
        raise EmptyMask("placement has no foreground on the canvas")
    return int(np.count_nonzero(mask & ~nearer)) / total


def visibility_ok(v: float, lo: float, hi: float) -> bool:
    return v == 1.0 or lo <= v <= hi


@dataclass(frozen=True, eq=False)
class _Warped:
    image: np.ndarray
    mask: np.ndarray
    centroid: tuple[float, float]


def warp_sprite(sprite: Sprite, scale: float, orientation: float) -> _Warped:
    """Scale the mask's longer side to ``scale`` px, then rotate."""
    box = tight_box_from_mask(sprite.mask)
    x0, y0, x1, y1 = box.to_int()
    patch = sprite.patch[y0:y1, x0:x1]
    mask = sprite.mask[y0:y1, x0:x1]
    s = scale / max(x1 - x0, y1 - y0)
    t = AffineTransform.scaling(s).then(AffineTransform.rotation(orientation))
    img, m, _ = warp_raster(patch, mask, t)
    if not m.any():
        raise EmptyMask("sprite vanished under warping")
    return _Warped(img, m, mask_centroid(m))


def _clip(origin, shape, width, height):
    """Canvas and local slices of a crop placed at ``origin``; None if off-canvas."""
    ox, oy = origin
    h, w = shape
    cx0, cy0 = max(ox, 0), max(oy, 0)
    cx1, cy1 = min(ox + w, width), min(oy + h, height)
    if cx0 >= cx1 or cy0 >= cy1:
        return None
    return (slice(cy0, cy1), slice(cx0, cx1)), (slice(cy0 - oy, cy1 - oy), slice(cx0 - ox, cx1 - ox))


def _origin(warped: _Warped, anchor) -> tuple[int, int]:
    return (int(math.floor(anchor[0] - warped.centroid[0] + 0.5)),
            int(math.floor(anchor[1] - warped.centroid[1] + 0.5)))


def _evaluate(warped: _Warped, anchor, covered: np.ndarray, cfg: ComposerConfig):
    """(visibility or None, reason, placement data)."""
    h, w = covered.shape
    origin = _origin(warped, anchor)
    sl = _clip(origin, warped.mask.shape, w, h)
    if sl is None:
        return None, "off canvas", None
    csl, lsl = sl
    mask = warped.mask[lsl]
    if np.count_nonzero(mask) < cfg.min_foreground:
        return None, "too little foreground on canvas", None
    v = compute_visibility(mask, covered[csl])
    if not visibility_ok(v, cfg.min_visibility, cfg.max_occluded_visibility):
        return v, f"visibility {v:.3f} outside band", None
    return v, "", (csl, lsl, mask)


def repair_visibility(warped: _Warped, plan: ScenePlan, index: int, accepted: Sequence[tuple[float, float]],
                      covered: np.ndarray, cfg: ComposerConfig):
    """Redraw the anchor of placement ``index`` until its visibility is valid.

    Returns ``(anchor, visibility, data, attempts)``; ``anchor`` is None after
    ``max_repair_attempts`` failures.
    """
    rng = rng_for(plan.seed, 1, index)
    p = plan.placements[index]
    for attempt in range(1, cfg.max_repair_attempts + 1):
        if plan.pattern == "group" and accepted:
            spacing = float(np.mean([q.scale for q in plan.placements]))
            anchor = _near_anchor(rng, list(accepted), spacing, cfg, plan.width, plan.height)
        else:
            anchor = _uniform_anchor(rng, plan.width, plan.height, p.scale / 2)
        v, _, data = _evaluate(warped, anchor, covered, cfg)
        if data is not None:
            return anchor, v, data, attempt
    return None, None, None, cfg.max_repair_attempts


def _feather(canvas: np.ndarray, csl, mask: np.ndarray, pixels: np.ndarray) -> None:
    """Blend a 1-px ring outside ``mask`` halfway towards the adjacent sprite colour."""
    h, w = canvas.shape[:2]
    ys, xs = csl
    y0, y1 = max(ys.start - 1, 0), min(ys.stop + 1, h)
    x0, x1 = max(xs.start - 1, 0), min(xs.stop + 1, w)
    m = np.zeros((y1 - y0, x1 - x0), bool)
    px = np.zeros(m.shape + (3,), np.float64)
    iy, ix = ys.start - y0, xs.start - x0
    m[iy:iy + mask.shape[0], ix:ix + mask.shape[1]] = mask
    px[iy:iy + mask.shape[0], ix:ix + mask.shape[1]] = np.where(mask[:, :, None], pixels, 0)
    ring = ndimage.binary_dilation(m, structure=_EIGHT) & ~m
    if not ring.any():
        return
    k = np.ones((3, 3))
    count = ndimage.correlate(m.astype(np.float64), k, mode="constant")
    region = canvas[y0:y1, x0:x1]
    for c in range(3):
        avg = ndimage.correlate(px[:, :, c], k, mode="constant")[ring] / count[ring]
        region[:, :, c][ring] = np.rint(0.5 * region[:, :, c][ring] + 0.5 * avg).astype(np.uint8)


def render_scene(plan: ScenePlan, sprites: Sequence[Sprite], bg: FilledBackground | np.ndarray,
                 cfg: ComposerConfig = ComposerConfig()) -> CompositeScene:
    base = bg.image if isinstance(bg, FilledBackground) else np.asarray(bg)
    height, width = base.shape[:2]
    if (width, height) != (plan.width, plan.height):
        raise ValueError(f"plan is for {plan.width}x{plan.height}, background is {width}x{height}")
    cfg = replace(cfg, min_visibility=plan.min_visibility, max_occluded_visibility=plan.max_occluded_visibility)

    covered = np.zeros((height, width), bool)
    placements = list(plan.placements)
    order = sorted(range(len(placements)), key=lambda i: (placements[i].depth_rank, i))
    accepted_anchors: list[tuple[float, float]] = []
    layers: list[Layer] = []
    vis: list[float] = []
    dropped: list[tuple[int, str]] = []
    for i in order:
        p = placements[i]
        try:
            warped = warp_sprite(sprites[p.sprite_id], p.scale, p.orientation)
        except EmptyMask as exc:
            dropped.append((i, str(exc)))
            continue
        v, reason, data = _evaluate(warped, p.anchor, covered, cfg)
        if data is None:
            anchor, v, data, tries = repair_visibility(warped, plan, i, accepted_anchors, covered, cfg)
            if anchor is None:
                msg = f"{reason}; unrepaired after {tries} attempts"
                log.info("scene %d: dropping placement %d: %s", plan.seed, i, msg)
                dropped.append((i, msg))
                continue
            placements[i] = replace(p, anchor=anchor)
        csl, lsl, mask = data
        visible = mask & ~covered[csl]
        covered[csl] |= mask
        pixels = warped.image[lsl]
        layers.append(Layer(i, (csl[1].start, csl[0].start), mask, visible, pixels))
        accepted_anchors.append(placements[i].anchor)
        vis.append(float(v))
    if not layers:
        raise SceneRejected(f"every placement dropped: {dropped}")

    canvas = base.copy()
    far_first = layers[::-1]
    if cfg.feather:
        for layer in far_first:
            _feather(canvas, _layer_slices(layer), layer.mask, layer.pixels)
    for layer in far_first:
        ys, xs = _layer_slices(layer)
        region = canvas[ys, xs]
        region[layer.mask] = layer.pixels[layer.mask]

    axis, obb = [], []
    for layer in layers:
        full = layer.full((height, width), visible=True)
        axis.append(Label(0, tight_box_from_mask(full), normalized=False).to_normalized(width, height))
        corners = np.array(min_area_rect(full).corners())
        corners[:, 0] = np.clip(corners[:, 0], 0, width)
        corners[:, 1] = np.clip(corners[:, 1], 0, height)
        quad = Quad(tuple((float(x), float(y)) for x, y in corners))
        obb.append(Label(0, quad, normalized=False).to_normalized(width, height))
    final = replace(plan, placements=tuple(placements))
    return CompositeScene(canvas, LabelSet(tuple(axis)), LabelSet(tuple(obb)), tuple(vis), final,
                          tuple(layers), tuple(dropped))


def _layer_slices(layer: Layer):
    x, y = layer.origin
    h, w = layer.mask.shape
    return slice(y, y + h), slice(x, x + w)


# --- batches -----------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(backgrounds, sprites, cfg):
    _WORKER.update(backgrounds=backgrounds, sprites=sprites, cfg=cfg)


def compose_one(index: int, master_seed: int, backgrounds: Sequence[FilledBackground],
                sprites: Sequence[Sprite], cfg: ComposerConfig = ComposerConfig()):
    """Scene ``index`` of a batch, or the rejection reason as a string."""
    seed = derive_seed(master_seed, STREAM_COMPOSE, index)
    rng = rng_for(seed, 2)
    bg = backgrounds[int(rng.integers(len(backgrounds)))]
    pattern = "group" if rng.random() < cfg.group_fraction else "individual"
    try:
        plan = plan_scene(bg, len(sprites), pattern, seed, cfg)
        return render_scene(plan, sprites, bg, cfg)
    except (SceneRejected, SceneInfeasible) as exc:
        log.warning("scene %d rejected: %s", index, exc)
        return f"{type(exc).__name__}: {exc}"


def _compose_worker(args):
    index, master_seed = args
    return compose_one(index, master_seed, _WORKER["backgrounds"], _WORKER["sprites"], _WORKER["cfg"])


def generate_batch(backgrounds: Sequence[FilledBackground], sprites: Sequence[Sprite], count: int,
                   master_seed: int, cfg: ComposerConfig = ComposerConfig(), workers: int = 1):
    """``count`` scenes in index order; rejected indices hold the reason string."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not backgrounds or not sprites:
        raise ValueError("need at least one background and one sprite")
    jobs = [(i, master_seed) for i in range(count)]
    if workers <= 1:
        return [compose_one(i, s, backgrounds, sprites, cfg) for i, s in jobs]
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(list(backgrounds), list(sprites), cfg)) as pool:
        return list(pool.map(_compose_worker, jobs, chunksize=max(1, count // (4 * workers))))


def _write_one(index: int, master_seed: int, root: Path, backgrounds, sprites, cfg):
    scene = compose_one(index, master_seed, backgrounds, sprites, cfg)
    if isinstance(scene, str):
        return index, scene, ()
    write_scene(root, index, scene)
    return index, None, tuple(scene.dropped)


def _write_worker(args):
    index, master_seed, root = args
    return _write_one(index, master_seed, root, _WORKER["backgrounds"], _WORKER["sprites"], _WORKER["cfg"])


def write_batch(root: str | Path, backgrounds: Sequence[FilledBackground], sprites: Sequence[Sprite],
                count: int, master_seed: int, cfg: ComposerConfig = ComposerConfig(), workers: int = 1):
    """Like ``generate_batch`` but each scene is written as soon as it is composed.

    Memory stays flat in ``count``. Returns ``(index, rejection reason or None,
    dropped placements)`` per index, in index order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not backgrounds or not sprites:
        raise ValueError("need at least one background and one sprite")
    root = Path(root)
    if workers <= 1:
        return [_write_one(i, master_seed, root, backgrounds, sprites, cfg) for i in range(count)]
    jobs = [(i, master_seed, root) for i in range(count)]
    with ProcessPoolExecutor(workers, initializer=_init_worker,
                             initargs=(list(backgrounds), list(sprites), cfg)) as pool:
        return list(pool.map(_write_worker, jobs, chunksize=max(1, min(16, count // (4 * workers)))))


def scene_stem(index: int) -> str:
    return f"synth_{index:06d}"


def write_scene(root: str | Path, index: int, scene: CompositeScene) -> None:
    root = Path(root)
    stem = scene_stem(index)
    write_image(root / "images" / f"{stem}.png", scene.image)
    write_text(root / "labels" / f"{stem}.txt", write_labels(scene.labels, "axis"))
    write_text(root / "labels_obb" / f"{stem}.txt", write_labels(scene.obb_labels, "obb"))
    write_text(root / "scenes" / f"{stem}.plan", scene.plan.to_json())
