"""Configuration dataclasses, presets and TOML loading.

Every tunable default lives here as a dataclass field so that a config file
only has to name what it changes. Keys map one-to-one onto the nested
dataclasses, e.g. ``synth.mask.area_range`` or ``network.base_channels``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class ImagingConfig:
    patch: int = 64
    stride: int | None = None  # None -> equal to patch (non-overlapping)
    resize: tuple[int, int] | None = (512, 512)
    colorspace: str = "grayscale"

    @property
    def effective_stride(self) -> int:
        return self.stride or self.patch


@dataclass
class MaskConfig:
    shapes: tuple[str, ...] = ("ellipse", "polygon", "brushstroke")
    count: int = 1
    area_range: tuple[float, float] = (0.02, 0.25)


@dataclass
class SynthConfig:
    lambda_range: tuple[float, float] = (0.3, 0.9)
    mode_probs: dict[str, float] = field(
        default_factory=lambda: {"occlusion": 0.5, "destructive": 0.5})
    source_dir: str | None = None
    mask: MaskConfig = field(default_factory=MaskConfig)


@dataclass
class NetworkConfig:
    in_channels: int = 1
    patch: int = 64
    blocks: int = 5
    base_channels: int = 64
    max_channels: int = 512
    memory_size: int = 512
    classifier_widths: tuple[int, ...] = (512, 256, 1)
    addressing_hidden: int = 256
    # 1-based encoder levels whose skip pathway goes through a GFRM;
    # None -> the two deepest levels below the latent.
    gfrm_levels: tuple[int, ...] | None = None
    texton_size: int = 2
    gfrm_trainable: bool = False
    # 1-based discriminator blocks used by the perceptual loss
    perceptual_layers: tuple[int, ...] = (3, 4)
    init_std: float = 0.02

    def channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels)
                for i in range(self.blocks)]

    @property
    def latent_side(self) -> int:
        return self.patch // 2 ** self.blocks

    @property
    def latent_dim(self) -> int:
        return self.channels()[-1] * self.latent_side ** 2

    def resolved_gfrm_levels(self) -> tuple[int, ...]:
        if self.gfrm_levels is not None:
            return tuple(sorted(self.gfrm_levels, reverse=True))
        return tuple(lv for lv in (self.blocks - 1, self.blocks - 2) if lv >= 1)

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class LossWeights:
    rec1: float = 100.0
    adv1: float = 1.0
    lat1: float = 1.0
    rec2: float = 100.0
    adv2: float = 1.0
    epsilon: float = 1e-5
    psi: float = 0.5
    nonsaturating: bool = True


@dataclass
class TrainingSchedule:
    t1: int = 200_000
    t2: int = 100_000
    lr: float = 1e-3
    batch_size: int = 16
    grad_clip: float = 10.0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    memory_stride: int | None = None  # patch stride when harvesting latents; None -> patch // 4
    kmeans_iters: int = 100


@dataclass
class InspectionConfig:
    c0: float = 1e-4
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_mode: str = "covariance"  # or "sigma_product"
    median_kernel: int = 3
    k_sigma: float = 3.0
    normalize_maps: bool = True


@dataclass
class PipelineConfig:
    exit_mode: str = "threshold"  # always_patch | always_pixel | threshold
    threshold_margin: float = 0.1


@dataclass
class Config:
    preset: str = "paper"
    seed: int = 0
    imaging: ImagingConfig = field(default_factory=ImagingConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainingSchedule = field(default_factory=TrainingSchedule)
    inspection: InspectionConfig = field(default_factory=InspectionConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def paper_preset() -> Config:
    return Config()


def tiny_preset() -> Config:
    """Desk-scale preset: 3 blocks, 32x32 patches, 16 base channels."""
    cfg = Config(preset="tiny")
    cfg.imaging = ImagingConfig(patch=32, resize=None)
    cfg.network = NetworkConfig(patch=32, blocks=3, base_channels=16,
                                memory_size=128, perceptual_layers=(2, 3))
    cfg.train = TrainingSchedule(t1=2000, t2=1000, batch_size=16, memory_stride=8)
    return cfg


PRESETS = {"paper": paper_preset, "tiny": tiny_preset}


def _coerce(value: Any, target: Any) -> Any:
    if isinstance(target, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(target, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _merge(obj: Any, data: dict[str, Any], prefix: str = "") -> None:
    names = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted!r} must be a table")
            _merge(current, value, dotted + ".")
        else:
            if isinstance(value, list) and current is None:
                value = tuple(value)
            setattr(obj, key, _coerce(value, current))


def _unflatten(data: dict[str, Any]) -> dict[str, Any]:
    # accept both [synth.mask] tables and dotted keys at top level
    out: dict[str, Any] = {}
    for key, value in data.items():
        parts = key.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        if isinstance(value, dict):
            node.setdefault(parts[-1], {}).update(_unflatten(value))
        else:
            node[parts[-1]] = value
    return out


def load_config(path: str | os.PathLike | None = None, preset: str | None = None) -> Config:
    """Build a config from a preset, an optional TOML file and ``FMRNET_SEED``.

    The file may name its own preset with a top-level ``preset = "tiny"`` key;
    an explicit ``preset`` argument wins.
    """
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = _unflatten(tomllib.load(fh))
    name = preset or data.pop("preset", None) or "paper"
    data.pop("preset", None)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]()
    _merge(cfg, data)
    env_seed = os.environ.get("FMRNET_SEED")
    if env_seed is not None:
        cfg.seed = int(env_seed)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    net = cfg.network
    if net.patch % 2 ** net.blocks:
        raise ConfigError(f"patch {net.patch} not divisible by 2**{net.blocks}")
    if cfg.imaging.patch != net.patch:
        raise ConfigError("imaging.patch must equal network.patch")
    for lv in net.resolved_gfrm_levels():
        if not 1 <= lv < net.blocks:
            raise ConfigError(f"GFRM level {lv} invalid for {net.blocks} blocks")
        side = net.patch // 2 ** lv
        if side % net.texton_size:
            raise ConfigError(f"level {lv} map side {side} not divisible by texton size")
    if not 0 < cfg.weights.epsilon < 1:
        raise ConfigError("weights.epsilon must lie in (0, 1)")
    if cfg.train.t1 < 1 or cfg.train.t2 < 1 or cfg.train.lr <= 0:
        raise ConfigError("t1, t2 must be >= 1 and lr > 0")
    if cfg.inspection.median_kernel % 2 == 0:
        raise ConfigError("inspection.median_kernel must be odd")
    if cfg.inspection.ssim_mode not in ("covariance", "sigma_product"):
        raise ConfigError("inspection.ssim_mode must be 'covariance' or 'sigma_product'")
    if cfg.pipeline.exit_mode not in ("always_patch", "always_pixel", "threshold"):
        raise ConfigError(f"unknown exit mode {cfg.pipeline.exit_mode!r}")
    lo, hi = cfg.synth.lambda_range
    if not 0 < lo <= hi < 1:
        raise ConfigError("synth.lambda_range must lie inside (0, 1)")


def dump_config(cfg: Config, path: str | os.PathLike) -> None:
    """Write ``cfg`` as a TOML file readable by :func:`load_config`."""
    # None-valued fields are omitted; the preset restores them on load
    lines: list[str] = [f"preset = {json.dumps(cfg.preset)}", f"seed = {cfg.seed}"]

    def fmt(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{ " + ", ".join(f"{k} = {fmt(x)}" for k, x in v.items()) + " }"
        return repr(v)

    def emit(obj: Any, prefix: str) -> None:
        scalars, tables = [], []
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            (tables if dataclasses.is_dataclass(v) else scalars).append((f.name, v))
        lines.append(f"\n[{prefix}]")
        for k, v in scalars:
            if v is not None:
                lines.append(f"{k} = {fmt(v)}")
        for k, v in tables:
            emit(v, f"{prefix}.{k}")

    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            emit(v, f.name)
    Path(path).write_text("\n".join(lines) + "\n")
