"""Multimodal anomaly maps: gradient-magnitude similarity, SSIM and residual.

Inputs are ``(H, W)`` or ``(H, W, C)`` arrays in [0, 1]. Multichannel maps
are computed per channel and averaged over channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import InspectionConfig

PREWITT_X = np.array([[1.0, 0.0, -1.0]] * 3) / 3.0
PREWITT_Y = PREWITT_X.T.copy()


def _per_channel(fn, a: np.ndarray, b: np.ndarray, *args) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return fn(a, b, *args)
    return np.mean([fn(a[..., c], b[..., c], *args) for c in range(a.shape[2])], axis=0)


def gradient_magnitude(img: np.ndarray) -> np.ndarray:
    """Prewitt gradient magnitude with reflective borders (single channel)."""
    img = np.asarray(img, dtype=np.float64)
    # box sums then differences, equivalent to correlating with PREWITT_X / PREWITT_Y
    # ("symmetric" padding is scipy's "reflect"); flat regions give exactly zero
    p = np.pad(img, 1, mode="symmetric")
    cols = p[:-2] + p[1:-1] + p[2:]
    rows = p[:, :-2] + p[:, 1:-1] + p[:, 2:]
    gx = (cols[:, :-2] - cols[:, 2:]) / 3.0
    gy = (rows[:-2] - rows[2:]) / 3.0
    return np.sqrt(gx ** 2 + gy ** 2)


def gms_from_gradients(g_a: np.ndarray, g_b: np.ndarray, c0: float) -> np.ndarray:
    return (2 * g_a * g_b + c0) / (g_a ** 2 + g_b ** 2 + c0)


def gms_map(img: np.ndarray, recon: np.ndarray, c0: float = 1e-4) -> np.ndarray:
    return _per_channel(lambda a, b: gms_from_gradients(gradient_magnitude(a),
                                                       gradient_magnitude(b), c0), img, recon)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray, c1: float, c2: float,
                  mode: str) -> np.ndarray:
    def filt(x):
        return ndimage.correlate(x, window, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    var_a = np.maximum(filt(a * a) - mu_a ** 2, 0.0)
    var_b = np.maximum(filt(b * b) - mu_b ** 2, 0.0)
    if mode == "covariance":
        cross = filt(a * b) - mu_a * mu_b
    else:
        cross = np.sqrt(var_a * var_b)
    return ((2 * mu_a * mu_b + c1) * (2 * cross + c2)) / \
        ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_map(img: np.ndarray, recon: np.ndarray, cfg: InspectionConfig | None = None) -> np.ndarray:
    """Gaussian-windowed SSIM.

    ``cfg.ssim_mode="covariance"`` uses the cross-covariance in the structure
    term; ``"sigma_product"`` uses the product of the two standard deviations.
    """
    cfg = cfg or InspectionConfig()
    window = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    return _per_channel(_ssim_channel, img, recon, window, cfg.c1, cfg.c2, cfg.ssim_mode)


def residual_map(img: np.ndarray, recon: np.ndarray) -> np.ndarray:
    diff = np.abs(np.asarray(img, np.float64) - np.asarray(recon, np.float64))
    return diff if diff.ndim == 2 else diff.mean(axis=2)


@dataclass
class AnomalyMapSet:
    gms: np.ndarray
    ssim: np.ndarray
    residual: np.ndarray
    fused: np.ndarray | None = None


def modality_maps(img: np.ndarray, recon: np.ndarray,
                  cfg: InspectionConfig | None = None) -> AnomalyMapSet:
    """``1 - GMS``, ``1 - SSIM`` and the absolute residual (unfused)."""
    cfg = cfg or InspectionConfig()
    return AnomalyMapSet(1.0 - gms_map(img, recon, cfg.c0),
                         1.0 - ssim_map(img, recon, cfg),
                         residual_map(img, recon))


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def fuse(maps: AnomalyMapSet, cfg: InspectionConfig | None = None,
         median: bool | None = None, normalize: bool | None = None) -> np.ndarray:
    """Elementwise product of the modality maps after optional median / min-max."""
    cfg = cfg or InspectionConfig()
    median = cfg.median_kernel > 1 if median is None else median
    normalize = cfg.normalize_maps if normalize is None else normalize
    out = None
    for m in (maps.gms, maps.ssim, maps.residual):
        m = np.asarray(m, dtype=np.float64)
        if median:
            m = ndimage.median_filter(m, size=cfg.median_kernel, mode="reflect")
        if normalize:
            m = _minmax(m)
        out = m if out is None else out * m
    return out


def binarize_ksigma(amap: np.ndarray, k: float = 3.0) -> np.ndarray:
    amap = np.asarray(amap, dtype=np.float64)
    if np.ptp(amap) == 0:
        # the rounded mean of a constant map can sit an ulp below its value
        return np.zeros(amap.shape, dtype=bool)
    return amap > amap.mean() + k * amap.std()
