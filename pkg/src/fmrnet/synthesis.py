"""Artificial defect synthesis: random masks, anomaly sources and compositing."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage, ImageDraw
from scipy import ndimage

from .config import SynthConfig
from .imaging import DatasetIndex, IMAGE_SUFFIXES, read_image

MODES = ("occlusion", "destructive")
SHAPES = ("ellipse", "polygon", "brushstroke")


@dataclass
class DefectSpec:
    lam: float
    mask: np.ndarray  # same shape as the image, values in {0, 1}
    source: np.ndarray
    mode: str = "destructive"


@dataclass
class MaskSpec:
    shape_family: str = "ellipse"
    count: int = 1
    area_range: tuple[float, float] = (0.02, 0.25)
    seed: int = 0


def composite(original: np.ndarray, spec: DefectSpec) -> np.ndarray:
    """``lam * ((1 - m) * I_o + m * I_d) + (1 - lam) * I_d``, clipped to [0, 1]."""
    original = np.asarray(original, dtype=np.float64)
    mask = np.asarray(spec.mask, dtype=np.float64)
    source = np.asarray(spec.source, dtype=np.float64)
    if not original.shape == mask.shape == source.shape:
        raise ValueError(f"shape mismatch: {original.shape}, {mask.shape}, {source.shape}")
    if not 0 < spec.lam <= 1:
        raise ValueError(f"lambda must lie in (0, 1], got {spec.lam}")
    out = spec.lam * ((1 - mask) * original + mask * source) + (1 - spec.lam) * source
    return np.clip(out, 0.0, 1.0)


def _ellipse(h: int, w: int, area: float, rng: np.random.Generator) -> np.ndarray:
    ratio = rng.uniform(0.4, 1.0)
    a = math.sqrt(area / (math.pi * ratio))
    b = a * ratio
    theta = rng.uniform(0, math.pi)
    cy, cx = rng.uniform(b, max(b, h - b)), rng.uniform(b, max(b, w - b))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon(h: int, w: int, area: float, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.55, 1.0, n)
    # area of the unit star polygon, used to scale it to the target area
    unit = abs(0.5 * np.sum(radii * np.roll(radii, -1) * np.sin(np.roll(angles, -1) - angles)))
    scale = math.sqrt(area / max(unit, 1e-6))
    cy = rng.uniform(scale * 0.6, max(scale * 0.6, h - scale * 0.6))
    cx = rng.uniform(scale * 0.6, max(scale * 0.6, w - scale * 0.6))
    pts = [(cx + scale * r * math.cos(t), cy + scale * r * math.sin(t))
           for r, t in zip(radii, angles)]
    canvas = PILImage.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def _brushstroke(h: int, w: int, area: float, rng: np.random.Generator) -> np.ndarray:
    width = max(2, int(round(math.sqrt(area) / rng.uniform(2.5, 4.0))))
    canvas = PILImage.new("L", (w, h), 0)
    draw = ImageDraw.Draw(canvas)
    y, x = rng.uniform(0, h), rng.uniform(0, w)
    heading = rng.uniform(0, 2 * np.pi)
    step = max(1.0, width * 0.75)
    for _ in range(10 * (h + w)):
        heading += rng.normal(0, 0.5)
        ny = float(np.clip(y + step * math.sin(heading), 0, h - 1))
        nx = float(np.clip(x + step * math.cos(heading), 0, w - 1))
        draw.line([(x, y), (nx, ny)], fill=1, width=width)
        r = width / 2
        draw.ellipse([nx - r, ny - r, nx + r, ny + r], fill=1)
        y, x = ny, nx
        if np.count_nonzero(np.asarray(canvas)) >= area:
            break
    return np.asarray(canvas, dtype=bool)


_DRAW = {"ellipse": _ellipse, "polygon": _polygon, "brushstroke": _brushstroke}


def random_mask(spec: MaskSpec, shape: tuple[int, ...], max_tries: int = 100) -> np.ndarray:
    """Binary mask, identical across channels, with area fraction in range +-10%.

    Returns an array of ``shape``; a 2-tuple shape yields an ``(H, W)`` mask.
    """
    lo, hi = spec.area_range
    if not 0 < lo <= hi < 1:
        raise ValueError(f"area_range must lie inside (0, 1), got {spec.area_range}")
    if spec.shape_family not in _DRAW:
        raise ValueError(f"unknown shape family {spec.shape_family!r}")
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    h, w = shape[:2]
    rng = np.random.default_rng(spec.seed)
    accept_lo, accept_hi = lo * 0.9, min(hi * 1.1, 1.0)
    for _ in range(max_tries):
        target = rng.uniform(lo, hi) * h * w
        mask = np.zeros((h, w), dtype=bool)
        for _ in range(spec.count):
            mask |= _DRAW[spec.shape_family](h, w, target / spec.count, rng)
        frac = mask.mean()
        if accept_lo <= frac <= accept_hi:
            break
    else:
        raise ValueError(f"could not draw a {spec.shape_family} mask with area in "
                         f"{spec.area_range} after {max_tries} tries")
    if len(shape) == 3:
        mask = np.repeat(mask[..., None], shape[2], axis=2)
    return mask.astype(np.float32)


def procedural_texture(shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    """Random blotches, gradients or stripes in [0, 1] used as an anomaly source."""
    h, w, c = shape
    kind = rng.choice(["blotches", "gradient", "stripes", "noise"])
    if kind == "blotches":
        sigma = rng.uniform(1.0, max(1.5, min(h, w) / 8))
        base = ndimage.gaussian_filter(rng.random((h, w, c)), (sigma, sigma, 0))
    elif kind == "gradient":
        yy, xx = np.mgrid[0:h, 0:w]
        theta = rng.uniform(0, 2 * np.pi)
        base = (np.cos(theta) * xx + np.sin(theta) * yy)[..., None] * rng.uniform(0.5, 1.5, c)
        base = base + rng.normal(0, 0.05 * (np.ptp(base) + 1e-9), base.shape)
    elif kind == "stripes":
        yy, xx = np.mgrid[0:h, 0:w]
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(2.0, 12.0)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        base = np.repeat(np.sin(2 * np.pi * proj / period)[..., None], c, axis=2)
    else:
        base = rng.random((h, w, c))
    lo, hi = base.min(), base.max()
    base = (base - lo) / (hi - lo) if hi > lo else np.full_like(base, 0.5)
    # random contrast and offset so sources are not always full-range
    span = rng.uniform(0.4, 1.0)
    offset = rng.uniform(0, 1 - span)
    return (offset + span * base).astype(np.float32)


def _crop_to(img: np.ndarray, shape: tuple[int, int, int], rng: np.random.Generator) -> np.ndarray:
    h, w = shape[:2]
    ih, iw = img.shape[:2]
    if ih < h or iw < w:
        scale = max(h / ih, w / iw)
        size = (max(w, math.ceil(iw * scale)), max(h, math.ceil(ih * scale)))
        im = PILImage.fromarray(np.round(img[..., 0] * 255).astype(np.uint8)) if img.shape[2] == 1 \
            else PILImage.fromarray(np.round(img * 255).astype(np.uint8))
        img = np.asarray(im.resize(size, PILImage.BILINEAR), dtype=np.float32) / 255.0
        if img.ndim == 2:
            img = img[..., None]
        ih, iw = img.shape[:2]
    r = int(rng.integers(0, ih - h + 1))
    c = int(rng.integers(0, iw - w + 1))
    out = img[r:r + h, c:c + w]
    if out.shape[2] != shape[2]:
        out = out.mean(axis=2, keepdims=True) if shape[2] == 1 else np.repeat(out, shape[2], axis=2)
    return out.astype(np.float32)


def source_pool(source_dir: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(source_dir).rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def sample_anomaly_source(shape: tuple[int, int, int], seed: int | np.random.Generator,
                          pool: DatasetIndex | Sequence[str | os.PathLike] | None = None,
                          procedural: bool = True) -> np.ndarray:
    """Draw an anomaly image of ``shape`` from ``pool`` or the procedural generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(pool, DatasetIndex):
        pool = [e.path for e in pool.entries]
    if pool:
        path = pool[int(rng.integers(0, len(pool)))]
        colorspace = "grayscale" if shape[2] == 1 else "rgb"
        return _crop_to(read_image(path, colorspace), shape, rng)
    if not procedural:
        raise ValueError("empty anomaly-source pool and procedural fallback disabled")
    return procedural_texture(shape, rng)


def make_training_pair(original: np.ndarray, config: SynthConfig,
                       seed: int | np.random.Generator,
                       pool: Sequence[str | os.PathLike] | None = None,
                       mode: str | None = None):
    """Return ``(synthetic, original, mask)`` for one defect-free image.

    Destructive defects replace the masked texture (lambda = 1). Occlusion
    defects blend the source translucently inside the mask only, using the
    unmasked branch of the compositing rule with lambda from ``lambda_range``.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if mode is None:
        names = list(config.mode_probs)
        probs = np.array([config.mode_probs[n] for n in names], dtype=float)
        mode = names[int(rng.choice(len(names), p=probs / probs.sum()))]
    if mode not in MODES:
        raise ValueError(f"unknown defect mode {mode!r}")
    shapes = list(config.mask.shapes)
    mspec = MaskSpec(shapes[int(rng.integers(0, len(shapes)))], config.mask.count,
                     tuple(config.mask.area_range), int(rng.integers(0, 2 ** 31)))
    mask = random_mask(mspec, original.shape)
    if pool is None and config.source_dir:
        pool = source_pool(config.source_dir)
    source = sample_anomaly_source(original.shape, rng, pool)
    if mode == "destructive":
        synthetic = composite(original, DefectSpec(1.0, mask, source, mode))
    else:
        lam = float(rng.uniform(*config.lambda_range))
        blend = composite(original, DefectSpec(lam, np.zeros_like(mask), source, mode))
        synthetic = np.where(mask > 0, blend, original)
    return synthetic.astype(np.float32), original, mask
