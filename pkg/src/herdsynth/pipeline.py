"""Pipeline stages and their on-disk layout.

Everything a stage writes lives under the output root::

    extract/        manifest.yaml, sprites/, masked/, test_labels/
    backgrounds/    <stem>_bg.png
    bank/           sprite_NNN.png, sprite_NNN_mask.png, sprite_NNN.json
    diffusion/      checkpoint.zip
    generated/      sprite_NNN.png, sprite_NNN_mask.png, sprite_NNN.json
    synthetic/      images/, labels/, labels_obb/, scenes/
    stages/         <stage>.json: seed, config hash, input and output hashes
    eval/           metrics.txt, metrics.kv
    logs/           training and timing logs (wall-clock, not reproducible)

A stage clears its own directory before writing, so reruns with the same
inputs, config and seed reproduce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .augment import apply_spec, sample_spec
from .background import FilledBackground, recreate_background
from .composer import ComposerConfig, ScaleField, scene_stem, write_batch
from .config import PipelineConfig
from .dataset_io import (
    build_manifest,
    parse_labels,
    read_image,
    read_labels,
    read_mask,
    save_manifest,
    split_dataset,
    write_image,
    write_labels,
    write_mask,
    write_text,
)
from .diffusion import (
    AdamState,
    DenoiserConfig,
    init_params,
    load_checkpoint,
    make_schedule,
    reverse_sample,
    save_checkpoint,
    sprite_to_tensor,
    tensor_to_sprite,
    train,
)
from .errors import (
    ConfigError,
    HerdSynthError,
    MaskShapeError,
    MaskTooSmall,
    MissingStageInput,
    NoBorderAvailable,
    SamplingDiverged,
    SegmentationEmpty,
    SpriteRejected,
)
from .geometry import AxisBox
from .seeding import (
    STREAM_AUGMENT,
    STREAM_COMPOSE,
    STREAM_FILL,
    STREAM_INIT,
    STREAM_SAMPLE,
    STREAM_SPLIT,
    STREAM_TRAIN,
    derive_seed,
)
from .sprites import MaskedScene, Sprite, TransformRecord, baseline_segment, extract_sprites, import_mask

log = logging.getLogger(__name__)

STAGES = ("extract", "recreate", "augment", "train-diffusion", "sample", "compose")
STAGE_MANIFEST_VERSION = 1


@dataclass
class Context:
    cfg: PipelineConfig
    out: Path
    data: Path | None = None
    timings: list[tuple[str, float]] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "Context":
        if not cfg.output_root:
            raise ConfigError("output_root is not set (use --out or output_root in the config)")
        return cls(cfg, Path(cfg.output_root), Path(cfg.dataset_root) if cfg.dataset_root else None)

    def seed(self, *keys: int) -> int:
        return derive_seed(self.cfg.master_seed, *keys)


# --- hashing and stage records -----------------------------------------------


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_files(root: Path, paths: Iterable[Path], prefix: str) -> dict[str, str]:
    return {f"{prefix}/{p.relative_to(root).as_posix()}": file_sha256(p) for p in sorted(paths)}


def hash_tree(root: Path, sub: str, prefix: str = "out") -> dict[str, str]:
    base = root / sub
    if not base.exists():
        return {}
    return hash_files(root, (p for p in base.rglob("*") if p.is_file()), prefix)


def write_stage_record(ctx: Context, stage: str, sections: Sequence[str], inputs: dict[str, str],
                       outputs: dict[str, str], notes: dict | None = None) -> None:
    record = {
        "format_version": STAGE_MANIFEST_VERSION,
        "stage": stage,
        "master_seed": ctx.cfg.master_seed,
        "config_sha256": ctx.cfg.fingerprint(*sections),
        "inputs": inputs,
        "outputs": outputs,
        "notes": notes or {},
    }
    write_text(ctx.out / "stages" / f"{stage}.json", json.dumps(record, sort_keys=True, indent=1) + "\n")


def _require(path: Path, what: str, nonempty: bool = True) -> Path:
    if not path.exists() or (nonempty and path.is_dir() and not any(path.iterdir())):
        shown = f"{path}/" if not path.suffix else str(path)
        raise MissingStageInput(f"missing {what}: {shown}")
    return path


def _fresh(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _pool_map(fn: Callable, items: Sequence, workers: int, initializer=None, initargs=()) -> list:
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items))


# --- sprite files ------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def save_sprite(directory: Path, name: str, sprite: Sprite, extra: dict | None = None) -> None:
    write_image(directory / f"{name}.png", sprite.patch)
    write_mask(directory / f"{name}_mask.png", sprite.mask)
    b = sprite.source_box
    meta = {
        "source_image": sprite.source_image,
        "source_box": [b.x_min, b.y_min, b.x_max, b.y_max],
        "mask_source": sprite.mask_source,
        "transform_log": [{"op": r.op, "params": _jsonable(r.params), "geometric": r.geometric}
                          for r in sprite.transform_log],
        "extra": _jsonable(extra or {}),
    }
    write_text(directory / f"{name}.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_sprite(directory: Path, name: str) -> Sprite:
    meta = json.loads((directory / f"{name}.json").read_text())
    log_ = tuple(TransformRecord(r["op"], r["params"], r["geometric"]) for r in meta["transform_log"])
    return Sprite(read_image(directory / f"{name}.png"), read_mask(directory / f"{name}_mask.png"),
                  meta["source_image"], AxisBox(*meta["source_box"]), log_, meta["mask_source"])


def sprite_names(directory: Path) -> list[str]:
    return sorted(p.stem for p in directory.glob("*.json"))


def load_sprites(directory: Path) -> list[Sprite]:
    return [load_sprite(directory, n) for n in sprite_names(directory)]


# --- stages ------------------------------------------------------------------


def stage_extract(ctx: Context) -> dict:
    if ctx.data is None:
        raise ConfigError("dataset_root is not set (use --data or dataset_root in the config)")
    _require(ctx.data / "images", "dataset images directory")
    cfg = ctx.cfg
    split_seed = ctx.seed(STREAM_SPLIT)
    manifest = split_dataset(build_manifest(ctx.data, split_seed), cfg.split.test_fraction, split_seed)
    out = _fresh(ctx.out / "extract")
    save_manifest(manifest, out / "manifest.yaml")
    used = []
    kept = 0
    drops = []
    mask_dir = ctx.data / cfg.extract.mask_dir
    for entry in manifest.entries:
        label_path = ctx.data / entry.label
        used += [ctx.data / entry.image, label_path]
        if entry.split == "test":
            write_text(out / "test_labels" / f"{entry.stem}.txt", label_path.read_text())
            continue
        img = read_image(ctx.data / entry.image)
        h, w = img.shape[:2]
        labels = read_labels(label_path, w, h)
        sprites, masked = extract_sprites(img, labels, entry.stem)
        for j, sprite in enumerate(sprites):
            mpath = mask_dir / f"{entry.stem}_{j}_mask.png"
            try:
                if mpath.exists():
                    used.append(mpath)
                    sprite = import_mask(sprite, read_mask(mpath), cfg.extract.min_foreground)
                else:
                    sprite = baseline_segment(sprite, cfg.extract.border_ring, cfg.extract.tau,
                                              cfg.extract.min_foreground)
            except (MaskShapeError, MaskTooSmall, SegmentationEmpty, ValueError) as exc:
                log.warning("dropping sprite %s #%d: %s", entry.stem, j, exc)
                drops.append([entry.stem, j, str(exc)])
                continue
            save_sprite(out / "sprites", f"{entry.stem}_{j:03d}", sprite, {"box_index": j})
            kept += 1
        write_image(out / "masked" / f"{entry.stem}.png", masked.background)
        write_text(out / "masked" / f"{entry.stem}.json",
                   json.dumps({"source_image": entry.stem, "holes": [list(hh) for hh in masked.holes]},
                              indent=1) + "\n")
    notes = {"train_images": len(manifest.by_split("train")), "test_images": len(manifest.by_split("test")),
             "sprites": kept, "dropped": drops}
    write_stage_record(ctx, "extract", ("split", "extract"), hash_files(ctx.data, used, "data"),
                       hash_tree(ctx.out, "extract"), notes)
    return notes


def _recreate_one(args):
    png, holes, stem, seed, rc = args
    scene = MaskedScene(read_image(png), tuple(tuple(h) for h in holes), stem)
    try:
        return stem, recreate_background(scene, seed, rc["border_width"], rc["sigma"], rc["kernel_radius"]).image
    except NoBorderAvailable as exc:
        return stem, str(exc)


def stage_recreate(ctx: Context) -> dict:
    masked = _require(ctx.out / "extract" / "masked", "masked scenes from the extract stage")
    jobs = []
    for i, meta_path in enumerate(sorted(masked.glob("*.json"))):
        meta = json.loads(meta_path.read_text())
        jobs.append((meta_path.with_suffix(".png"), meta["holes"], meta["source_image"],
                     ctx.seed(STREAM_FILL, i), ctx.cfg.recreate.model_dump()))
    out = _fresh(ctx.out / "backgrounds")
    skipped = []
    for stem, result in _pool_map(_recreate_one, jobs, ctx.cfg.workers):
        if isinstance(result, str):
            log.warning("no background for %s: %s", stem, result)
            skipped.append([stem, result])
            continue
        write_image(out / f"{stem}_bg.png", result)
    write_stage_record(ctx, "recreate", ("recreate",), hash_tree(ctx.out, "extract/masked"),
                       hash_tree(ctx.out, "backgrounds"), {"skipped": skipped})
    return {"backgrounds": len(jobs) - len(skipped), "skipped": skipped}


def stage_augment(ctx: Context) -> dict:
    src = _require(ctx.out / "extract" / "sprites", "sprites from the extract stage")
    ac = ctx.cfg.augment
    out = _fresh(ctx.out / "bank")
    n = 0
    for k, name in enumerate(sprite_names(src)):
        sprite = load_sprite(src, name)
        save_sprite(out, f"sprite_{n:03d}", sprite, {"from": name, "copy": 0})
        n += 1
        for c in range(1, ac.copies + 1):
            spec = sample_spec(ctx.seed(STREAM_AUGMENT, k, c), ac.contrast_range, ac.p_flip,
                               ac.p_contrast, ac.p_rotate, ac.rotation_range)
            aug = apply_spec(sprite, spec)
            save_sprite(out, f"sprite_{n:03d}", aug, {"from": name, "copy": c, "spec": {
                "flip": spec.flip, "contrast_factor": spec.contrast_factor,
                "rotation_deg": spec.rotation_deg, "seed": spec.seed}})
            n += 1
    write_stage_record(ctx, "augment", ("augment",), hash_tree(ctx.out, "extract/sprites"),
                       hash_tree(ctx.out, "bank"), {"bank_size": n})
    return {"bank_size": n}


def _denoiser_config(ctx: Context) -> DenoiserConfig:
    d = ctx.cfg.diffusion
    return DenoiserConfig(d.resolution, d.channels, d.temb_dim)


def stage_train(ctx: Context, resume: bool = False) -> dict:
    bank = _require(ctx.out / "bank", "sprite bank from the augment stage")
    d = ctx.cfg.diffusion
    sprites = load_sprites(bank)
    if not sprites:
        raise MissingStageInput(f"sprite bank is empty: {bank}")
    data = np.stack([sprite_to_tensor(s, d.resolution) for s in sprites])
    ckpt = ctx.out / "diffusion" / "checkpoint.zip"
    sched = make_schedule(d.timesteps, d.beta_start, d.beta_end)
    if resume and ckpt.exists():
        params, adam, sched, _ = load_checkpoint(ckpt)
        log.info("resuming from step %d", adam.step)
    else:
        _fresh(ctx.out / "diffusion")
        params = init_params(_denoiser_config(ctx), ctx.seed(STREAM_INIT))
        adam = AdamState.zeros_like(params.weights, lr=d.lr)
    remaining = max(0, d.steps - adam.step)
    log_path = ctx.out / "logs" / "train.log"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "a" if resume else "w") as fh:
        params, adam, losses = train(params, adam, data, sched, remaining, d.batch_size,
                                     ctx.seed(STREAM_TRAIN), log_file=fh)
    save_checkpoint(ckpt, params, adam, sched, {"bank_size": len(sprites)})
    notes = {"steps": adam.step, "parameters": params.count}
    if losses:
        notes["final_loss"] = losses[-1]
    write_stage_record(ctx, "train-diffusion", ("diffusion",), hash_tree(ctx.out, "bank"),
                       hash_tree(ctx.out, "diffusion"), notes)
    return notes


_SAMPLER: dict = {}


def _init_sampler(ckpt: str, threshold: float, border_ring: int, min_fg: int):
    params, _, sched, _ = load_checkpoint(ckpt)
    _SAMPLER.update(params=params, sched=sched, threshold=threshold, ring=border_ring, min_fg=min_fg)


def _sample_one(args):
    index, seed = args
    s = _SAMPLER
    try:
        x = reverse_sample(s["params"], s["sched"], seed)
        return index, tensor_to_sprite(x, s["threshold"], s["ring"], s["min_fg"], f"diffusion_{index:03d}")
    except (SpriteRejected, SamplingDiverged) as exc:
        return index, f"{type(exc).__name__}: {exc}"


def stage_sample(ctx: Context) -> dict:
    ckpt = _require(ctx.out / "diffusion" / "checkpoint.zip", "diffusion checkpoint from train-diffusion")
    d = ctx.cfg.diffusion
    jobs = [(i, ctx.seed(STREAM_SAMPLE, i)) for i in range(d.samples)]
    results = _pool_map(_sample_one, jobs, ctx.cfg.workers, _init_sampler,
                        (str(ckpt), d.threshold, ctx.cfg.extract.border_ring, ctx.cfg.extract.min_foreground))
    out = _fresh(ctx.out / "generated")
    rejected = []
    for index, result in results:
        if isinstance(result, str):
            rejected.append([index, result])
            continue
        save_sprite(out, f"sprite_{index:03d}", result, {"sample_seed": jobs[index][1]})
    if rejected:
        log.warning("%d of %d diffusion samples rejected", len(rejected), len(jobs))
    write_stage_record(ctx, "sample", ("diffusion",), {"out/diffusion/checkpoint.zip": file_sha256(ckpt)},
                       hash_tree(ctx.out, "generated"), {"rejected": rejected})
    return {"generated": len(jobs) - len(rejected), "rejected": len(rejected)}


def composer_config(cfg: PipelineConfig) -> ComposerConfig:
    c = cfg.compose
    names = list(c.fields)
    return ComposerConfig(
        fields=tuple(ScaleField(n, *c.fields[n].range, jitter=c.jitter) for n in names),
        field_weights=tuple(c.fields[n].weight for n in names),
        group_size=c.group_size,
        individual_size=c.individual_size,
        distance_range=c.distance_range,
        min_visibility=c.min_visibility,
        max_occluded_visibility=c.max_occluded_visibility,
        max_repair_attempts=c.max_repair_attempts,
        min_foreground=cfg.extract.min_foreground,
        group_fraction=c.group_fraction,
        feather=c.feather,
    )


def validate_synthetic(root: Path) -> list[str]:
    """Problems found in a synthetic output directory; empty when everything checks out."""
    problems = []
    images = sorted((root / "images").glob("*.png"))
    for img in images:
        for sub, kind in (("labels", "axis"), ("labels_obb", "obb")):
            path = root / sub / f"{img.stem}.txt"
            if not path.exists():
                problems.append(f"{path}: missing")
                continue
            text = path.read_text()
            try:
                labels = parse_labels(text, kind=kind)
            except HerdSynthError as exc:
                problems.append(f"{path}: {exc}")
                continue
            if len(labels) == 0:
                problems.append(f"{path}: no labels")
            if write_labels(labels, kind) != text:
                problems.append(f"{path}: does not round-trip")
    return problems


def stage_compose(ctx: Context, skip_diffusion: bool = False) -> dict:
    bg_dir = _require(ctx.out / "backgrounds", "backgrounds from the recreate stage")
    bank_dir = _require(ctx.out / "bank", "sprite bank from the augment stage")
    sprites = load_sprites(bank_dir)
    inputs = {**hash_tree(ctx.out, "backgrounds"), **hash_tree(ctx.out, "bank")}
    if not skip_diffusion:
        gen_dir = _require(ctx.out / "generated", "generated sprites from the sample stage", nonempty=False)
        sprites += load_sprites(gen_dir)
        inputs.update(hash_tree(ctx.out, "generated"))
    backgrounds = [FilledBackground(read_image(p), (), p.stem[:-3], 0) for p in sorted(bg_dir.glob("*_bg.png"))]
    if not backgrounds:
        raise MissingStageInput(f"no backgrounds in {bg_dir}")
    count = ctx.cfg.compose.count
    out = _fresh(ctx.out / "synthetic")
    rejected, dropped = [], {}
    for i, reason, lost in write_batch(out, backgrounds, sprites, count, ctx.seed(STREAM_COMPOSE),
                                       composer_config(ctx.cfg), ctx.cfg.workers):
        if reason is not None:
            rejected.append([i, reason])
        elif lost:
            dropped[scene_stem(i)] = [list(d) for d in lost]
    problems = validate_synthetic(out)
    if problems:
        raise HerdSynthError("synthetic output failed validation:\n" + "\n".join(problems[:20]))
    notes = {"attempted": count, "written": count - len(rejected), "rejected": rejected,
             "dropped_placements": dropped, "bank_size": len(sprites), "skip_diffusion": skip_diffusion}
    write_stage_record(ctx, "compose", ("compose",), inputs, hash_tree(ctx.out, "synthetic"), notes)
    return {"attempted": count, "written": count - len(rejected), "rejected": len(rejected)}


def run_pipeline(ctx: Context, skip_diffusion: bool = False, report: Callable[[str], None] | None = None) -> dict:
    steps: list[tuple[str, Callable[[], dict]]] = [
        ("extract", lambda: stage_extract(ctx)),
        ("recreate", lambda: stage_recreate(ctx)),
        ("augment", lambda: stage_augment(ctx)),
    ]
    if skip_diffusion:
        for stale in ("diffusion", "generated"):
            if (ctx.out / stale).exists():
                shutil.rmtree(ctx.out / stale)
        for stale in ("train-diffusion", "sample"):
            (ctx.out / "stages" / f"{stale}.json").unlink(missing_ok=True)
    else:
        steps += [("train-diffusion", lambda: stage_train(ctx)), ("sample", lambda: stage_sample(ctx))]
    steps.append(("compose", lambda: stage_compose(ctx, skip_diffusion)))
    results = {}
    for name, fn in steps:
        results[name] = timed(ctx, name, fn, report)
    return results


def timed(ctx: Context, name: str, fn: Callable[[], dict], report: Callable[[str], None] | None = None) -> dict:
    start = time.perf_counter()
    result = fn()
    seconds = time.perf_counter() - start
    ctx.timings.append((name, seconds))
    path = ctx.out / "logs" / "timing.log"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(f"{name} {seconds:.3f}\n")
    if report is not None:
        report(f"{name}: {seconds:.1f} s {json.dumps(result, sort_keys=True)}")
    return result
