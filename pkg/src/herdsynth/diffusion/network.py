"""Noise-prediction network: a small convolutional encoder-decoder in numpy.

Tensors are NHWC float64. The layout is

    in-conv -> [stride-2 conv] x L -> + time embedding -> mid conv
            -> [nearest upsample, concat skip, conv] x L -> out-conv

with SiLU after every conv except the last. Gradients are derived by hand in
:func:`loss_and_grads`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ..errors import ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 64
    channels: tuple[int, ...] = (16, 24, 32, 48)
    temb_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2:
            raise ValueError("need at least one downsampling level")
        if self.resolution % (2 ** self.levels):
            raise ValueError(f"resolution {self.resolution} not divisible by 2**{self.levels}")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.channels
        s: dict[str, tuple[int, ...]] = {"in.w": (3, 3, 3, c[0]), "in.b": (c[0],)}
        for i in range(self.levels):
            s[f"down{i}.w"] = (3, 3, c[i], c[i + 1])
            s[f"down{i}.b"] = (c[i + 1],)
        s["temb1.w"] = (self.temb_dim, c[-1])
        s["temb1.b"] = (c[-1],)
        s["temb2.w"] = (c[-1], c[-1])
        s["temb2.b"] = (c[-1],)
        s["mid.w"] = (3, 3, c[-1], c[-1])
        s["mid.b"] = (c[-1],)
        for i in range(self.levels):
            s[f"up{i}.w"] = (3, 3, c[i + 1] + c[i], c[i])
            s[f"up{i}.b"] = (c[i],)
        s["out.w"] = (3, 3, c[0], 3)
        s["out.b"] = (3,)
        return s

    def to_dict(self) -> dict:
        return {"resolution": self.resolution, "channels": list(self.channels),
                "temb_dim": self.temb_dim}


@dataclass(frozen=True, eq=False)
class DenoiserParams:
    config: DenoiserConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.config.shapes()
        if set(shapes) != set(self.weights):
            raise ShapeError(f"parameter names do not match config: {sorted(set(shapes) ^ set(self.weights))}")
        for name, shape in shapes.items():
            if self.weights[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.weights[name].shape}")

    @property
    def count(self) -> int:
        return sum(int(w.size) for w in self.weights.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights.values())

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.weights.items()})


def init_params(config: DenoiserConfig, seed: int, zero_final: bool = True) -> DenoiserParams:
    """Fan-in scaled uniform weights, zero biases; final conv zeroed by default."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in config.shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[:-1]))
        bound = 1.0 / math.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    if zero_final:
        weights["out.w"][:] = 0.0
    return DenoiserParams(config, weights)


# --- layers ----------------------------------------------------------------


def _conv_windows(shape, stride):
    n, h, w, _ = shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    return ho, wo


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """3x3 convolution, zero padding 1."""
    n, h, wd, cin = x.shape
    ho, wo = _conv_windows(x.shape, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate(
        [xp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :]
         for ky in range(3) for kx in range(3)],
        axis=-1,
    )
    w2 = w.reshape(9 * cin, -1)
    out = cols.reshape(-1, 9 * cin) @ w2 + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride)


def conv_backward(dout: np.ndarray, w: np.ndarray, cache):
    cols, xshape, stride = cache
    n, h, wd, cin = xshape
    cout = dout.shape[-1]
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, 9 * cin).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(9 * cin, cout).T).reshape(n, ho, wo, 9 * cin)
    dxp = np.zeros((n, h + 2, wd + 2, cin))
    k = 0
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :] += \
                dcols[..., k * cin:(k + 1) * cin]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


def silu(a: np.ndarray) -> np.ndarray:
    return a * expit(a)


def silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def upsample2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(d: np.ndarray) -> np.ndarray:
    n, h, w, c = d.shape
    return d.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# --- model -----------------------------------------------------------------


def _check_input(params: DenoiserParams, xt: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    r = params.config.resolution
    xt = np.asarray(xt, dtype=np.float64)
    single = xt.ndim == 3
    if single:
        xt = xt[None]
    if xt.ndim != 4 or xt.shape[1:] != (r, r, 3):
        raise ShapeError(f"expected (N, {r}, {r}, 3) input, got {xt.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (xt.shape[0],))
    return xt, t


def _forward(params: DenoiserParams, x: np.ndarray, t: np.ndarray):
    W = params.weights
    cfg = params.config
    cache: dict = {}
    a, cache["in"] = conv_forward(x, W["in.w"], W["in.b"], 1)
    cache["in.a"] = a
    h = silu(a)
    skips = []
    for i in range(cfg.levels):
        skips.append(h)
        a, cache[f"down{i}"] = conv_forward(h, W[f"down{i}.w"], W[f"down{i}.b"], 2)
        cache[f"down{i}.a"] = a
        h = silu(a)
    e = timestep_embedding(t, cfg.temb_dim)
    a1 = e @ W["temb1.w"] + W["temb1.b"]
    s1 = silu(a1)
    emb = s1 @ W["temb2.w"] + W["temb2.b"]
    cache["temb"] = (e, a1, s1)
    h = h + emb[:, None, None, :]
    a, cache["mid"] = conv_forward(h, W["mid.w"], W["mid.b"], 1)
    cache["mid.a"] = a
    h = silu(a)
    for i in reversed(range(cfg.levels)):
        cat = np.concatenate([upsample2(h), skips[i]], axis=-1)
        a, cache[f"up{i}"] = conv_forward(cat, W[f"up{i}.w"], W[f"up{i}.b"], 1)
        cache[f"up{i}.a"] = a
        h = silu(a)
    out, cache["out"] = conv_forward(h, W["out.w"], W["out.b"], 1)
    return out, cache


def predict_noise(params: DenoiserParams, xt: np.ndarray, t) -> np.ndarray:
    x, tt = _check_input(params, xt, t)
    out, _ = _forward(params, x, tt)
    return out[0] if np.ndim(xt) == 3 else out


def loss_and_grads(params: DenoiserParams, xt: np.ndarray, t, eps: np.ndarray):
    """Mean squared error of the noise prediction and its parameter gradients."""
    x, tt = _check_input(params, xt, t)
    eps = np.asarray(eps, dtype=np.float64).reshape(x.shape)
    out, cache = _forward(params, x, tt)
    diff = out - eps
    loss = float(np.mean(diff * diff))

    W = params.weights
    cfg = params.config
    g: dict[str, np.ndarray] = {}
    d = 2.0 * diff / diff.size
    d, g["out.w"], g["out.b"] = conv_backward(d, W["out.w"], cache["out"])
    skip_grads: dict[int, np.ndarray] = {}
    for i in range(cfg.levels):
        d = d * silu_grad(cache[f"up{i}.a"])
        d, g[f"up{i}.w"], g[f"up{i}.b"] = conv_backward(d, W[f"up{i}.w"], cache[f"up{i}"])
        c_up = cfg.channels[i + 1]
        skip_grads[i] = d[..., c_up:]
        d = upsample2_backward(d[..., :c_up])
    d = d * silu_grad(cache["mid.a"])
    d, g["mid.w"], g["mid.b"] = conv_backward(d, W["mid.w"], cache["mid"])
    e, a1, s1 = cache["temb"]
    demb = d.sum(axis=(1, 2))
    g["temb2.w"] = s1.T @ demb
    g["temb2.b"] = demb.sum(axis=0)
    da1 = (demb @ W["temb2.w"].T) * silu_grad(a1)
    g["temb1.w"] = e.T @ da1
    g["temb1.b"] = da1.sum(axis=0)
    for i in reversed(range(cfg.levels)):
        d = d * silu_grad(cache[f"down{i}.a"])
        d, g[f"down{i}.w"], g[f"down{i}.b"] = conv_backward(d, W[f"down{i}.w"], cache[f"down{i}"])
        d = d + skip_grads[i]
    d = d * silu_grad(cache["in.a"])
    _, g["in.w"], g["in.b"] = conv_backward(d, W["in.w"], cache["in"])
    return loss, g
