"""Label grammars, dataset manifests, the train/test split and PNG I/O.

Two line grammars are supported, one object per line with normalized
coordinates:

* ``axis``: ``class cx cy w h``
* ``obb``:  ``class x1 y1 x2 y2 x3 y3 x4 y4``

Prediction files use the same grammars with a trailing confidence field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import yaml
from PIL import Image

from .errors import ParseError, RangeError, TooFewImages
from .geometry import AxisBox, OrientedBox, Point


LabelKind = Literal["axis", "obb"]
MANIFEST_VERSION = 1
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Quad:
    """Four corner points, as stored by the OBB grammar."""

    points: tuple[Point, Point, Point, Point]

    def corners(self) -> list[Point]:
        return list(self.points)

    @classmethod
    def from_oriented(cls, box: OrientedBox) -> "Quad":
        return cls(tuple((float(x), float(y)) for x, y in box.corners()))

    def scaled(self, sx: float, sy: float) -> "Quad":
        return Quad(tuple((x * sx, y * sy) for x, y in self.points))


@dataclass(frozen=True)
class Label:
    class_id: int
    box: AxisBox | Quad
    normalized: bool = True

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class id must be >= 0, got {self.class_id}")

    def to_pixels(self, img_w: int, img_h: int) -> "Label":
        if not self.normalized:
            return self
        return replace(self, box=_scale_box(self.box, img_w, img_h), normalized=False)

    def to_normalized(self, img_w: int, img_h: int) -> "Label":
        if self.normalized:
            return self
        return replace(self, box=_scale_box(self.box, 1 / img_w, 1 / img_h), normalized=True)

    def corners(self) -> list[Point]:
        return self.box.corners()


def _scale_box(box: AxisBox | Quad, sx: float, sy: float) -> AxisBox | Quad:
    if isinstance(box, AxisBox):
        return AxisBox(box.x_min * sx, box.y_min * sy, box.x_max * sx, box.y_max * sy)
    return box.scaled(sx, sy)


@dataclass(frozen=True)
class LabelSet:
    labels: tuple[Label, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def to_pixels(self, img_w: int, img_h: int) -> "LabelSet":
        return LabelSet(tuple(lab.to_pixels(img_w, img_h) for lab in self.labels))

    def to_normalized(self, img_w: int, img_h: int) -> "LabelSet":
        return LabelSet(tuple(lab.to_normalized(img_w, img_h) for lab in self.labels))

    def boxes(self) -> list[AxisBox | Quad]:
        return [lab.box for lab in self.labels]


@dataclass(frozen=True)
class Prediction:
    class_id: int
    box: AxisBox | Quad
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


# --- grammar ---------------------------------------------------------------

_FIELDS = {"axis": 4, "obb": 8}


def _parse_line(line: str, lineno: int, kind: LabelKind, with_conf: bool):
    parts = line.split()
    n = _FIELDS[kind]
    allowed = (n + 1, n + 2) if with_conf else (n + 1,)
    if len(parts) not in allowed:
        raise ParseError(f"expected {n + 1} fields for {kind} grammar, got {len(parts)}", lineno)
    try:
        cls = int(parts[0])
        vals = [float(p) for p in parts[1:n + 1]]
        conf = float(parts[n + 1]) if len(parts) == n + 2 else 1.0
    except ValueError as exc:
        raise ParseError(f"non-numeric field: {exc}", lineno) from None
    if cls < 0:
        raise ParseError(f"negative class id {cls}", lineno)
    for v in vals:
        if not math.isfinite(v) or v < 0.0 or v > 1.0:
            raise RangeError(f"coordinate {v} outside [0, 1]", lineno)
    if kind == "axis":
        cx, cy, w, h = vals
        if w <= 0 or h <= 0:
            raise ParseError("box width and height must be positive", lineno)
        edges = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
        edges = [min(max(e, 0.0), 1.0) if -_EDGE_SLACK < e < 1 + _EDGE_SLACK else e for e in edges]
        box: AxisBox | Quad = AxisBox(*edges)
    else:
        box = Quad(tuple((vals[i], vals[i + 1]) for i in range(0, 8, 2)))
    if not 0.0 <= conf <= 1.0:
        raise RangeError(f"confidence {conf} outside [0, 1]", lineno)
    return cls, box, conf


def _lines(text: str) -> Iterable[tuple[int, str]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line:
            yield lineno, line


def parse_labels(text: str, img_w: int | None = None, img_h: int | None = None,
                 kind: LabelKind = "axis") -> LabelSet:
    """Parse a label file. The result is normalized; pass image size to get pixels."""
    labels = []
    for lineno, line in _lines(text):
        cls, box, _ = _parse_line(line, lineno, kind, with_conf=False)
        labels.append(Label(cls, box))
    out = LabelSet(tuple(labels))
    if img_w is not None and img_h is not None:
        out = out.to_pixels(img_w, img_h)
    return out


def parse_predictions(text: str, kind: LabelKind = "axis") -> list[Prediction]:
    preds = []
    for lineno, line in _lines(text):
        cls, box, conf = _parse_line(line, lineno, kind, with_conf=True)
        preds.append(Prediction(cls, box, conf))
    return preds


_SCALE = 1_000_000
_EDGE_SLACK = 1e-9  # float noise when decoding center/size near an image edge


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _axis_fields(box: AxisBox) -> list[float]:
    # center and size in millionths, with the size trimmed so that the decoded
    # edges of an in-bounds box stay inside [0, 1]
    out = []
    for lo, hi in ((box.x_min, box.x_max), (box.y_min, box.y_max)):
        c = round((lo + hi) / 2 * _SCALE)
        size = round((hi - lo) * _SCALE)
        if 0 <= lo and hi <= 1:
            size = min(size, 2 * c, 2 * (_SCALE - c))
        out.append((c, size))
    return [out[0][0] / _SCALE, out[1][0] / _SCALE, out[0][1] / _SCALE, out[1][1] / _SCALE]


def write_labels(labels: LabelSet, kind: LabelKind = "axis",
                 img_w: int | None = None, img_h: int | None = None) -> str:
    """Serialize to the text grammar with 6-decimal fixed formatting."""
    lines = []
    for lab in labels:
        if not lab.normalized:
            if img_w is None or img_h is None:
                raise ValueError("pixel-space labels need img_w/img_h to serialize")
            lab = lab.to_normalized(img_w, img_h)
        box = lab.box
        if kind == "axis":
            if not isinstance(box, AxisBox):
                raise TypeError("axis grammar needs AxisBox labels")
            vals = _axis_fields(box)
        else:
            quad = box if isinstance(box, Quad) else Quad(tuple(box.corners()))
            vals = [c for p in quad.points for c in p]
        lines.append(" ".join([str(lab.class_id)] + [_fmt(v) for v in vals]))
    return "".join(line + "\n" for line in lines)


def write_predictions(preds: Sequence[Prediction], kind: LabelKind = "axis") -> str:
    body = write_labels(LabelSet(tuple(Label(p.class_id, p.box) for p in preds)), kind)
    lines = body.splitlines()
    return "".join(f"{line} {_fmt(p.confidence)}\n" for line, p in zip(lines, preds))


# --- manifest & split ------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: str
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split tag {self.split!r} not in {SPLITS}")

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    seed: int = 0
    format_version: int = MANIFEST_VERSION

    def __post_init__(self):
        paths = [e.image for e in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest image paths must be unique")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        ordered = tuple(sorted(self.entries, key=lambda e: e.image))
        object.__setattr__(self, "entries", ordered)

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]


def build_manifest(root: str | Path, seed: int = 0) -> DatasetManifest:
    """Pair ``images/*.png`` with ``labels/<stem>.txt`` under ``root``."""
    root = Path(root)
    entries = []
    for img in sorted((root / "images").glob("*.png")):
        label = root / "labels" / f"{img.stem}.txt"
        if not label.exists():
            raise FileNotFoundError(f"no label file for {img}: expected {label}")
        entries.append(ManifestEntry(img.relative_to(root).as_posix(),
                                     label.relative_to(root).as_posix()))
    return DatasetManifest(tuple(entries), seed=seed)


def split_dataset(manifest: DatasetManifest, test_fraction: float, seed: int) -> DatasetManifest:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(manifest.entries)
    if n < 2:
        raise TooFewImages(f"need at least 2 images to split, got {n}")
    n_test = int(math.floor(test_fraction * n + 0.5))  # round half up
    n_test = min(max(n_test, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    entries = tuple(
        replace(e, split="test" if i in test_idx else "train")
        for i, e in enumerate(manifest.entries)
    )
    return DatasetManifest(entries, seed=seed, format_version=manifest.format_version)


def manifest_to_text(manifest: DatasetManifest) -> str:
    doc = {
        "format_version": manifest.format_version,
        "seed": manifest.seed,
        "entries": [{"image": e.image, "label": e.label, "split": e.split}
                    for e in manifest.entries],
    }
    return yaml.safe_dump(doc, sort_keys=False)


def manifest_from_text(text: str) -> DatasetManifest:
    doc = yaml.safe_load(text) or {}
    version = doc.get("format_version")
    if version != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest format_version {version!r}")
    entries = tuple(ManifestEntry(**e) for e in doc.get("entries") or [])
    return DatasetManifest(entries, seed=int(doc.get("seed", 0)), format_version=version)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    write_text(path, manifest_to_text(manifest))


def load_manifest(path: str | Path, root: str | Path | None = None) -> DatasetManifest:
    """Load a manifest; with ``root`` given, also check every label file parses."""
    manifest = manifest_from_text(Path(path).read_text())
    if root is not None:
        for e in manifest.entries:
            read_labels(Path(root) / e.label)
    return manifest


# --- files -----------------------------------------------------------------


def _with_path(path: Path, parse, *args, **kw):
    try:
        return parse(path.read_text(), *args, **kw)
    except ParseError as exc:
        raise type(exc)(exc.message, exc.line, str(path)) from None


def read_labels(path: str | Path, img_w: int | None = None, img_h: int | None = None,
                kind: LabelKind = "axis") -> LabelSet:
    """``parse_labels`` on a file; parse errors name the file."""
    return _with_path(Path(path), parse_labels, img_w, img_h, kind=kind)


def read_predictions(path: str | Path, kind: LabelKind = "axis") -> list[Prediction]:
    return _with_path(Path(path), parse_predictions, kind=kind)


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).save(path, format="PNG")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_image(path, np.where(mask, 255, 0).astype(np.uint8))


def write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
