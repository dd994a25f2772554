"""Training, ancestral sampling and sprite conversion for the diffusion model."""

from __future__ import annotations

import io
import json
import logging
import time
import zipfile
from pathlib import Path
from typing import IO, NamedTuple

import numpy as np
from PIL import Image

from ..errors import SamplingDiverged, SpriteRejected, TrainingDiverged
from ..geometry import AxisBox
from ..seeding import derive_seed, rng_for
from ..sprites import MIN_FOREGROUND_PIXELS, Sprite, clean_mask, ring_mask
from .adam import AdamState, adam_update
from .network import DenoiserConfig, DenoiserParams, loss_and_grads, predict_noise
from .schedule import NoiseSchedule, forward_sample, make_schedule

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GRAY = 128


class StepResult(NamedTuple):
    params: DenoiserParams
    adam: AdamState
    loss: float
    grad_norm: float


def train_step(params: DenoiserParams, adam: AdamState, batch, sched: NoiseSchedule,
               seed: int) -> StepResult:
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.ndim != 4 or len(x0) == 0:
        raise ValueError("batch must be a nonempty (N, R, R, 3) stack")
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    xt = forward_sample(x0, t, eps, sched)
    loss, grads = loss_and_grads(params, xt, t, eps)
    grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if not (np.isfinite(loss) and np.isfinite(grad_norm)):
        raise TrainingDiverged(adam.step + 1, adam.lr, grad_norm)
    weights, adam = adam_update(params.weights, grads, adam)
    new = DenoiserParams(params.config, weights)
    if not new.is_finite():
        raise TrainingDiverged(adam.step, adam.lr, grad_norm)
    return StepResult(new, adam, loss, grad_norm)


def train(params: DenoiserParams, adam: AdamState, data: np.ndarray, sched: NoiseSchedule,
          steps: int, batch_size: int, seed: int, log_file: IO[str] | None = None):
    """Run ``steps`` more optimizer steps, continuing from ``adam.step``.

    Batch composition and noise for step ``k`` depend only on ``(seed, k)``, so
    resuming from a checkpoint reproduces an uninterrupted run.
    """
    data = np.asarray(data, dtype=np.float64)
    losses = []
    for k in range(adam.step, adam.step + steps):
        start = time.perf_counter()
        idx = rng_for(seed, k, 0).integers(0, len(data), size=batch_size)
        params, adam, loss, gn = train_step(params, adam, data[idx], sched, derive_seed(seed, k, 1))
        losses.append(loss)
        if log_file is not None:
            wall_ms = (time.perf_counter() - start) * 1000
            log_file.write(f"{k + 1} {loss:.6f} {gn:.6f} {wall_ms:.1f}\n")
    return params, adam, losses


def reverse_step(params: DenoiserParams, sched: NoiseSchedule, x: np.ndarray, t: int,
                 z: np.ndarray | None) -> np.ndarray:
    """One ancestral step ``x_t -> x_{t-1}``; the noise term is dropped at ``t == 1``."""
    eps_hat = predict_noise(params, x, t)
    beta = sched.beta[t - 1]
    mu = (x - beta / np.sqrt(1.0 - sched.alpha_bar[t - 1]) * eps_hat) / np.sqrt(sched.alpha[t - 1])
    if t > 1:
        mu = mu + np.sqrt(beta) * z
    return mu


def reverse_sample(params: DenoiserParams, sched: NoiseSchedule, seed: int) -> np.ndarray:
    r = params.config.resolution
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((r, r, 3))
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = reverse_step(params, sched, x, t, z)
        if not np.all(np.isfinite(x)):
            raise SamplingDiverged(t)
    return np.clip(x, -1.0, 1.0)


# --- sprite <-> tensor -------------------------------------------------------


def sprite_to_tensor(sprite: Sprite, resolution: int) -> np.ndarray:
    """Masked sprite on mid-gray, letterboxed to ``resolution`` square, in [-1, 1]."""
    comp = np.where(sprite.mask[:, :, None], sprite.patch, np.uint8(GRAY)).astype(np.uint8)
    h, w = sprite.mask.shape
    s = resolution / max(h, w)
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    small = np.asarray(Image.fromarray(comp).resize((nw, nh), Image.BILINEAR))
    canvas = np.full((resolution, resolution, 3), GRAY, np.uint8)
    oy, ox = (resolution - nh) // 2, (resolution - nw) // 2
    canvas[oy:oy + nh, ox:ox + nw] = small
    return canvas.astype(np.float64) / 127.5 - 1.0


def tensor_to_image(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def tensor_to_sprite(x: np.ndarray, threshold: float = 20.0, border_ring: int = 2,
                     min_foreground: int = MIN_FOREGROUND_PIXELS,
                     source_id: str = "diffusion") -> Sprite:
    """Foreground = luminance departing from the rim mean, then mask cleanup."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise SpriteRejected("non-finite tensor")
    img = tensor_to_image(x)
    lum = img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    rim = lum[ring_mask(lum.shape, border_ring)].mean()
    fg = clean_mask(np.abs(lum - rim) > threshold)
    count = int(fg.sum())
    if count < max(1, min_foreground):
        raise SpriteRejected(f"foreground {count} px below {min_foreground}")
    h, w = fg.shape
    return Sprite(img, fg, source_id, AxisBox(0, 0, w, h), mask_source="diffusion")


# --- checkpoints -------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path: str | Path, params: DenoiserParams, adam: AdamState,
                    sched: NoiseSchedule, extra: dict | None = None) -> None:
    """Zip of ``.npy`` arrays plus a JSON header; byte-stable for equal inputs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "schedule": sched.to_dict(),
        "denoiser": params.config.to_dict(),
        "adam": {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w") as zf:
        _zip_write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for group, arrays in (("param", params.weights), ("adam_m", adam.m), ("adam_v", adam.v)):
            for name in sorted(arrays):
                _zip_write(zf, f"{group}/{name}.npy", _npy_bytes(arrays[name]))


def load_checkpoint(path: str | Path):
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            group, key = name[:-4].split("/", 1)
            groups[group][key] = np.lib.format.read_array(io.BytesIO(zf.read(name)))
    d = meta["denoiser"]
    config = DenoiserConfig(d["resolution"], tuple(d["channels"]), d["temb_dim"])
    params = DenoiserParams(config, groups["param"])
    a = meta["adam"]
    adam = AdamState(groups["adam_m"], groups["adam_v"], a["step"], a["lr"], a["beta1"],
                     a["beta2"], a["eps"])
    s = meta["schedule"]
    sched = make_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"])
    return params, adam, sched, meta.get("extra", {})
