"""Inference paths: full pixel-level, early-exit patch-level and split execution."""
from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import interchange
from .config import Config, InspectionConfig
from .imaging import PatchGrid, reassemble, slice_patches
from .inspection import AnomalyMapSet, fuse, modality_maps
from .networks import FMRNet
from .training import to_tensor


class PipelineError(RuntimeError):
    pass


@dataclass
class InferenceResult:
    level: str  # "patch" or "pixel"
    origins: list[tuple[int, int]]
    patch_scores: np.ndarray | None = None
    maps: AnomalyMapSet | None = None
    reconstruction: np.ndarray | None = None
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def fused(self) -> np.ndarray | None:
        return None if self.maps is None else self.maps.fused


@dataclass
class ExitPolicy:
    mode: str = "threshold"  # always_patch | always_pixel | threshold
    threshold: float | None = None

    def __post_init__(self):
        if self.mode not in ("always_patch", "always_pixel", "threshold"):
            raise ValueError(f"unknown exit mode {self.mode!r}")


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def _grid(image: np.ndarray, cfg: Config) -> PatchGrid:
    return slice_patches(image, cfg.network.patch, cfg.imaging.effective_stride)


@torch.no_grad()
def infer_patch_level(model: FMRNet, image: np.ndarray, cfg: Config) -> InferenceResult:
    """Encoder plus nearest-memory distance per patch; the decoder never runs."""
    if model.memory is None:
        raise PipelineError("patch-level inference needs a memory bank (phase-2 checkpoint required)")
    model.eval()
    t0 = time.perf_counter()
    grid = _grid(image, cfg)
    scores = model.patch_scores(to_tensor(grid.patches)).numpy()
    return InferenceResult("patch", grid.origins, patch_scores=scores,
                           timing={"total": _ms(t0)})


@torch.no_grad()
def edge_head(model: FMRNet, image: np.ndarray, cfg: Config,
              with_scores: bool = True) -> "OrderedDict[str, np.ndarray]":
    """Run the encoder side and collect every tensor the cloud tail needs."""
    if with_scores and model.memory is None:
        raise PipelineError("phase-2 checkpoint required: model has no memory bank")
    model.eval()
    grid = _grid(image, cfg)
    x = to_tensor(grid.patches)
    latent, skips = model.encode(x)
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    out["meta"] = np.array([*grid.source_shape, grid.patch, grid.stride], dtype=np.float32)
    out["origins"] = np.array(grid.origins, dtype=np.float32).reshape(-1, 2)
    out["patches"] = x.numpy()
    out["latent"] = latent.numpy()
    for lv, s in skips.items():
        out[f"skip{lv}"] = s.numpy()
    if with_scores:
        out["scores"] = model.patch_scores(x).numpy()
    return out


@torch.no_grad()
def cloud_tail(model: FMRNet, tensors: "OrderedDict[str, np.ndarray]",
               inspection: InspectionConfig) -> InferenceResult:
    """Memory substitution, GFRM, decoding and multimodal maps from edge tensors."""
    if model.memory is None:
        raise PipelineError("phase-2 checkpoint required: model has no memory bank")
    model.eval()
    t0 = time.perf_counter()
    h, w, p, stride = (int(v) for v in tensors["meta"])
    origins = [(int(r), int(c)) for r, c in tensors["origins"]]
    x = torch.from_numpy(np.asarray(tensors["patches"], np.float32))
    latent = torch.from_numpy(np.asarray(tensors["latent"], np.float32))
    skips = {lv: torch.from_numpy(np.asarray(tensors[f"skip{lv}"], np.float32))
             for lv in model.decoder.levels}
    recon = model.decode(model.restore(latent.flatten(1)), skips)
    t_net = _ms(t0)

    t1 = time.perf_counter()
    imgs = x.numpy().transpose(0, 2, 3, 1).astype(np.float64)
    recs = recon.numpy().transpose(0, 2, 3, 1).astype(np.float64)
    per = [modality_maps(a, b, inspection) for a, b in zip(imgs, recs)]
    grid = PatchGrid(imgs, origins, (h, w), p, stride)
    maps = AnomalyMapSet(reassemble(grid, [m.gms for m in per]),
                         reassemble(grid, [m.ssim for m in per]),
                         reassemble(grid, [m.residual for m in per]))
    maps.fused = fuse(maps, inspection)
    reconstruction = reassemble(grid, list(recs))
    scores = tensors.get("scores")
    return InferenceResult("pixel", origins,
                           patch_scores=None if scores is None else np.asarray(scores),
                           maps=maps, reconstruction=reconstruction,
                           timing={"network": t_net, "inspection": _ms(t1)})


def infer_pixel(model: FMRNet, image: np.ndarray, cfg: Config) -> InferenceResult:
    """Slice, reconstruct each patch through memory and GFRM, and fuse the anomaly maps."""
    if model.memory is None:
        raise PipelineError("phase-2 checkpoint required: model has no memory bank")
    t0 = time.perf_counter()
    tensors = edge_head(model, image, cfg, with_scores=False)
    t_head = _ms(t0)
    result = cloud_tail(model, tensors, cfg.inspection)
    result.patch_scores = None
    result.timing = {"edge": t_head, **result.timing, "total": _ms(t0)}
    return result


def split_export(model: FMRNet, image: np.ndarray, cfg: Config,
                 boundary: str = "after_encoder") -> bytes:
    if boundary != "after_encoder":
        raise ValueError(f"unsupported split boundary {boundary!r}")
    return interchange.encode(edge_head(model, image, cfg), model.encoder_fingerprint())


def split_resume(model: FMRNet, data: bytes, cfg: Config) -> InferenceResult:
    tensors, fingerprint = interchange.decode(data)
    if fingerprint != model.encoder_fingerprint():
        raise PipelineError("encoder fingerprint mismatch between interchange payload and model")
    return cloud_tail(model, tensors, cfg.inspection)


def decide_exit(policy: ExitPolicy, patch_scores: Sequence[float]) -> str:
    """``"exit_early"`` or ``"continue"`` (to pixel level)."""
    if policy.mode == "always_patch":
        return "exit_early"
    if policy.mode == "always_pixel":
        return "continue"
    if policy.threshold is None:
        raise ValueError("threshold mode needs a calibrated threshold")
    return "continue" if np.any(np.asarray(patch_scores) > policy.threshold) else "exit_early"


@torch.no_grad()
def calibrate_threshold(model: FMRNet, images: Sequence[np.ndarray], cfg: Config,
                        margin: float | None = None) -> float:
    """``(1 + margin) * max`` patch score over defect-free images."""
    margin = cfg.pipeline.threshold_margin if margin is None else margin
    best = 0.0
    for im in images:
        best = max(best, float(infer_patch_level(model, im, cfg).patch_scores.max()))
    return (1.0 + margin) * best


def inspect(model: FMRNet, image: np.ndarray, cfg: Config, level: str = "auto",
            threshold: float | None = None) -> InferenceResult:
    """Dispatch to patch or pixel level; ``auto`` consults the exit policy."""
    if level == "pixel":
        return infer_pixel(model, image, cfg)
    patch = infer_patch_level(model, image, cfg)
    if level == "patch":
        return patch
    policy = ExitPolicy(cfg.pipeline.exit_mode, threshold)
    if decide_exit(policy, patch.patch_scores) == "exit_early":
        return patch
    result = infer_pixel(model, image, cfg)
    result.patch_scores = patch.patch_scores
    return result
