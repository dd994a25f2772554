"""Pipeline configuration: presets, YAML file, environment, then CLI flags.

Every section rejects unknown keys. Environment overrides take the form
``HERDSYNTH__<SECTION>__<KEY>=<yaml value>``, for example
``HERDSYNTH__COMPOSE__COUNT=20`` or ``HERDSYNTH__MASTER_SEED=7``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Literal, Mapping

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

ENV_PREFIX = "HERDSYNTH__"
Pair = tuple[float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _ordered(pair: Pair, name: str) -> Pair:
    if pair[0] > pair[1]:
        raise ValueError(f"{name}: lower bound {pair[0]} exceeds upper bound {pair[1]}")
    return pair


class SplitConfig(_Section):
    test_fraction: float = Field(0.1, gt=0, lt=1)


class ExtractConfig(_Section):
    border_ring: int = Field(2, ge=1)
    tau: float = Field(3.0, gt=0)
    min_foreground: int = Field(25, ge=1)
    mask_dir: str = "masks"


class RecreateConfig(_Section):
    border_width: int = Field(1, ge=1)
    sigma: float = Field(2.0, gt=0)
    kernel_radius: int = Field(6, ge=1)

    @model_validator(mode="after")
    def _radius(self):
        if self.kernel_radius < math.ceil(3 * self.sigma):
            raise ValueError(f"kernel_radius {self.kernel_radius} < ceil(3 * sigma)")
        return self


class AugmentConfig(_Section):
    copies: int = Field(3, ge=0)
    contrast_range: Pair = (0.7, 1.3)
    p_flip: float = Field(0.5, ge=0, le=1)
    p_contrast: float = Field(1.0, ge=0, le=1)
    p_rotate: float = Field(1.0, ge=0, le=1)
    rotation_range: Pair = (10.0, 20.0)

    @model_validator(mode="after")
    def _ranges(self):
        _ordered(self.contrast_range, "contrast_range")
        _ordered(self.rotation_range, "rotation_range")
        if self.contrast_range[0] <= 0:
            raise ValueError("contrast factors must be positive")
        lo, hi = self.rotation_range
        if not (10.0 <= lo and hi <= 20.0):
            raise ValueError("rotation_range must lie within [10, 20] degrees")
        return self


class DiffusionConfig(_Section):
    resolution: int = Field(64, ge=8)
    timesteps: int = Field(1000, ge=1)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)
    lr: float = Field(2e-4, ge=0)
    batch_size: int = Field(128, ge=1)
    steps: int = Field(20000, ge=0)
    channels: tuple[int, ...] = (16, 24, 32, 48)
    temb_dim: int = Field(32, ge=2)
    samples: int = Field(200, ge=0)
    threshold: float = Field(20.0, gt=0)

    @model_validator(mode="after")
    def _shape(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        if self.resolution % 2 ** (len(self.channels) - 1):
            raise ValueError("resolution must be divisible by 2**(len(channels) - 1)")
        return self


class FieldConfig(_Section):
    range: Pair
    weight: float = Field(1.0, ge=0)


class ComposeConfig(_Section):
    count: int = Field(1000, ge=1)
    group_fraction: float = Field(0.7, ge=0, le=1)
    fields: dict[str, FieldConfig] = {
        "near": FieldConfig(range=(450, 500)),
        "mid": FieldConfig(range=(300, 350)),
        "far": FieldConfig(range=(180, 200)),
    }
    jitter: float = Field(0.05, ge=0, lt=1)
    group_size: tuple[int, int] = (6, 10)
    individual_size: tuple[int, int] = (1, 5)
    distance_range: Pair = (0.6, 1.5)
    min_visibility: float = Field(0.10, ge=0, le=1)
    max_occluded_visibility: float = Field(0.90, ge=0, lt=1)
    max_repair_attempts: int = Field(20, ge=0)
    feather: bool = True

    @model_validator(mode="after")
    def _bounds(self):
        if not self.fields:
            raise ValueError("at least one scale field is required")
        for name, f in self.fields.items():
            if not 0 < f.range[0] < f.range[1]:
                raise ValueError(f"scale field {name}: need 0 < lo < hi")
        _ordered(self.distance_range, "distance_range")
        _ordered(self.group_size, "group_size")
        _ordered(self.individual_size, "individual_size")
        if self.min_visibility > self.max_occluded_visibility:
            raise ValueError("min_visibility exceeds max_occluded_visibility")
        return self


class EvaluateConfig(_Section):
    iou_threshold: float = Field(0.5, gt=0, le=1)
    kind: Literal["axis", "obb"] = "axis"


class PipelineConfig(_Section):
    dataset_root: str | None = None
    output_root: str | None = None
    master_seed: int = Field(0, ge=0, lt=2 ** 64)
    workers: int = Field(1, ge=1)
    split: SplitConfig = SplitConfig()
    extract: ExtractConfig = ExtractConfig()
    recreate: RecreateConfig = RecreateConfig()
    augment: AugmentConfig = AugmentConfig()
    diffusion: DiffusionConfig = DiffusionConfig()
    compose: ComposeConfig = ComposeConfig()
    evaluate: EvaluateConfig = EvaluateConfig()

    def fingerprint(self, *sections: str) -> str:
        """Hash of the given sections plus the seed; paths and worker count excluded."""
        d = self.model_dump(mode="json")
        keep = {k: d[k] for k in sections} if sections else {
            k: v for k, v in d.items() if k not in ("dataset_root", "output_root", "workers")}
        keep["master_seed"] = self.master_seed
        return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)


PRESETS: dict[str, dict[str, Any]] = {
    "full": {},
    "desk": {
        "diffusion": {"resolution": 16, "timesteps": 100, "steps": 200, "batch_size": 32, "samples": 16},
        "compose": {"count": 50},
    },
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def env_overrides(environ: Mapping[str, str]) -> dict:
    out: dict = {}
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p.lower() for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from None
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = value
    return out


def load_config(path: str | Path | None = None, preset: str = "full",
                overrides: Mapping | None = None, environ: Mapping[str, str] | None = None) -> PipelineConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data: dict = copy.deepcopy(PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = _merge(data, loaded)
    data = _merge(data, env_overrides(os.environ if environ is None else environ))
    data = _merge(data, overrides or {})
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        where = f"{path}: " if path is not None else ""
        raise ConfigError(f"{where}invalid configuration:\n{exc}") from None
