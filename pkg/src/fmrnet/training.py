"""Two-phase optimisation: reconstruction + latent constraint, memory, restoration."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .cmfm import establish_memory
from .config import Config, LossWeights, SynthConfig, TrainingSchedule
from .imaging import slice_patches
from .losses import (loss_adv, loss_discriminator, loss_latent_batch, loss_rec,
                     weight_matrices)
from .networks import FMRNet, save_checkpoint
from .synthesis import make_training_pair

logger = logging.getLogger(__name__)

PHASE1_GROUPS = ("encoder", "decoder", "gfrm", "classifier")
PHASE2_GROUPS = ("decoder", "addressing", "gfrm")


class TrainingDiverged(FloatingPointError):
    def __init__(self, phase: str, iteration: int, terms: dict[str, float]):
        super().__init__(f"non-finite loss in {phase} at iteration {iteration}: {terms}")
        self.phase, self.iteration, self.terms = phase, iteration, terms


def to_tensor(patches: np.ndarray) -> torch.Tensor:
    """``(n, P, P, C)`` float array -> ``(n, C, P, P)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(patches, np.float32).transpose(0, 3, 1, 2)))


class PatchSampler:
    """Random patches from defect-free images and their synthetic counterparts."""

    def __init__(self, images: Sequence[np.ndarray], patch: int, synth: SynthConfig,
                 seed: int = 0, pool: Sequence[str] | None = None):
        if not images:
            raise ValueError("no training images")
        self.images = [np.asarray(im, np.float32) for im in images]
        self.patch = patch
        self.synth = synth
        self.pool = pool
        self.rng = np.random.default_rng(seed)
        for im in self.images:
            if min(im.shape[:2]) < patch:
                raise ValueError(f"image {im.shape} smaller than patch {patch}")

    def _crop(self, img: np.ndarray) -> np.ndarray:
        h, w = img.shape[:2]
        r = int(self.rng.integers(0, h - self.patch + 1))
        c = int(self.rng.integers(0, w - self.patch + 1))
        return img[r:r + self.patch, c:c + self.patch]

    def _synthetic(self, clean: np.ndarray) -> np.ndarray:
        return make_training_pair(clean, self.synth, self.rng, self.pool)[0]

    def triplets(self, n: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(P0, P+, P-)``: two crops of one clean image and a synthetic crop of it."""
        p0, pp, pn = [], [], []
        for _ in range(n):
            img = self.images[int(self.rng.integers(len(self.images)))]
            p0.append(self._crop(img))
            pp.append(self._crop(img))
            pn.append(self._synthetic(self._crop(img)))
        return to_tensor(np.stack(p0)), to_tensor(np.stack(pp)), to_tensor(np.stack(pn))

    def pairs(self, n: int) -> tuple[torch.Tensor, torch.Tensor]:
        """``(clean, synthetic)`` crops at the same location."""
        clean, synth = [], []
        for _ in range(n):
            img = self.images[int(self.rng.integers(len(self.images)))]
            c = self._crop(img)
            clean.append(c)
            synth.append(self._synthetic(c))
        return to_tensor(np.stack(clean)), to_tensor(np.stack(synth))


_LEAD = ("phase", "iteration")


@dataclass
class TrainLog:
    rows: list[dict[str, float]] = field(default_factory=list)
    path: Path | None = None

    def add(self, row: dict[str, float]) -> None:
        self.rows.append(row)

    def flush(self) -> None:
        if self.path is None or not self.rows:
            return
        keys = sorted({k for r in self.rows for k in r}, key=lambda k: (_LEAD.index(k) if k in _LEAD else len(_LEAD), k))
        with open(self.path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)


def _params(model: FMRNet, groups: Sequence[str]) -> list[torch.nn.Parameter]:
    return [p for g in groups for p in model.group_parameters(g)]


def _check_finite(phase: str, it: int, terms: dict[str, torch.Tensor],
                  dump_dir: Path | None) -> None:
    values = {k: float(v.detach()) for k, v in terms.items()}
    if all(math.isfinite(v) for v in values.values()):
        return
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        (dump_dir / f"diverged_{phase}_{it}.json").write_text(json.dumps(values, indent=2))
    raise TrainingDiverged(phase, it, values)


def train_phase1(model: FMRNet, sampler: PatchSampler, schedule: TrainingSchedule,
                 weights: LossWeights, iterations: int | None = None,
                 log: TrainLog | None = None, out_dir: Path | None = None,
                 callback: Callable[[int, dict[str, float]], None] | None = None) -> FMRNet:
    """Joint reconstruction / latent-constraint training with discriminator alternation."""
    iterations = schedule.t1 if iterations is None else iterations
    layers = model.cfg.perceptual_layers
    gen_params = _params(model, PHASE1_GROUPS)
    gen_opt = torch.optim.Adam(gen_params, lr=schedule.lr, betas=(0.5, 0.999))
    dis_opt = torch.optim.Adam(model.discriminator.parameters(), lr=schedule.lr, betas=(0.5, 0.999))
    reg = weight_matrices([model.encoder, model.decoder, model.classifier])
    model.train()
    model.memory = None
    for it in range(1, iterations + 1):
        p0, pp, pn = sampler.triplets(schedule.batch_size)
        z_all, skips_all = model.encode(torch.cat([p0, pp, pn]))
        z_all = z_all.flatten(1)
        r0, rp, rn = z_all.split(len(p0))
        skips_pos = {lv: s[len(p0):2 * len(p0)] for lv, s in skips_all.items()}
        recon = model.decode(rp, skips_pos)

        dis_loss = loss_discriminator(model.discriminator, pp, recon)
        dis_opt.zero_grad(set_to_none=True)
        dis_loss.backward()
        dis_opt.step()

        l_rec = loss_rec(pp, recon, weights.epsilon, reg)
        l_adv = loss_adv(model.discriminator, pp, recon, layers, weights.psi, weights.nonsaturating)
        l_lat = loss_latent_batch(r0, rp, rn, model.classifier)
        total = weights.rec1 * l_rec + weights.adv1 * l_adv + weights.lat1 * l_lat
        terms = {"loss": total, "rec": l_rec, "adv": l_adv, "lat": l_lat, "dis": dis_loss}
        _check_finite("phase1", it, terms, out_dir)
        gen_opt.zero_grad(set_to_none=True)
        model.discriminator.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(gen_params, schedule.grad_clip)
        gen_opt.step()
        model.discriminator.zero_grad(set_to_none=True)

        row = {"phase": 1, "iteration": it, **{k: float(v.detach()) for k, v in terms.items()}}
        if log is not None:
            log.add(row)
        if callback is not None:
            callback(it, row)
        if out_dir is not None and schedule.checkpoint_every and it % schedule.checkpoint_every == 0:
            save_checkpoint(out_dir / f"phase1_{it:07d}.pt", model, "phase1", it)
    model.eval()
    return model


@torch.no_grad()
def harvest_latents(model: FMRNet, images: Sequence[np.ndarray], stride: int,
                    batch: int = 256) -> np.ndarray:
    """Encode every sliding-window patch of the defect-free images (eval mode)."""
    model.eval()
    patches = np.concatenate([slice_patches(im, model.cfg.patch, stride).patches for im in images])
    out = []
    for i in range(0, len(patches), batch):
        z, _ = model.encoder(to_tensor(patches[i:i + batch]))
        out.append(z.flatten(1).double().numpy())
    return np.concatenate(out)


def build_memory(model: FMRNet, images: Sequence[np.ndarray], schedule: TrainingSchedule,
                 seed: int = 0) -> FMRNet:
    stride = schedule.memory_stride or max(1, model.cfg.patch // 4)
    latents = harvest_latents(model, images, stride)
    model.memory = establish_memory(latents, model.cfg.memory_size, seed=seed,
                                    max_iter=schedule.kmeans_iters,
                                    encoder_fingerprint=model.encoder_fingerprint())
    return model


def train_phase2(model: FMRNet, sampler: PatchSampler, schedule: TrainingSchedule,
                 weights: LossWeights, iterations: int | None = None,
                 log: TrainLog | None = None, out_dir: Path | None = None,
                 callback: Callable[[int, dict[str, float]], None] | None = None) -> FMRNet:
    """Restoration training on synthetic defects with the encoder and memory locked."""
    if model.memory is None:
        raise RuntimeError("phase 2 requires an established memory bank")
    iterations = schedule.t2 if iterations is None else iterations
    layers = model.cfg.perceptual_layers
    gen_params = _params(model, PHASE2_GROUPS)
    gen_opt = torch.optim.Adam(gen_params, lr=schedule.lr, betas=(0.5, 0.999))
    dis_opt = torch.optim.Adam(model.discriminator.parameters(), lr=schedule.lr, betas=(0.5, 0.999))
    reg = weight_matrices([model.decoder, model.addressing])
    model.train()
    model.encoder.eval()
    model.classifier.eval()
    frozen = [p for g in ("encoder", "classifier") for p in model.group_parameters(g)]
    flags = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad_(False)
    try:
        for it in range(1, iterations + 1):
            clean, synth = sampler.pairs(schedule.batch_size)
            with torch.no_grad():
                latent, skips = model.encode(synth)
            recon = model.decode(model.restore(latent.flatten(1)), skips)

            dis_loss = loss_discriminator(model.discriminator, clean, recon)
            dis_opt.zero_grad(set_to_none=True)
            dis_loss.backward()
            dis_opt.step()

            l_rec = loss_rec(clean, recon, weights.epsilon, reg)
            l_adv = loss_adv(model.discriminator, clean, recon, layers, weights.psi,
                             weights.nonsaturating)
            total = weights.rec2 * l_rec + weights.adv2 * l_adv
            terms = {"loss": total, "rec": l_rec, "adv": l_adv, "dis": dis_loss}
            _check_finite("phase2", it, terms, out_dir)
            gen_opt.zero_grad(set_to_none=True)
            total.backward()
            torch.nn.utils.clip_grad_norm_(gen_params, schedule.grad_clip)
            gen_opt.step()
            model.discriminator.zero_grad(set_to_none=True)

            row = {"phase": 2, "iteration": it, **{k: float(v.detach()) for k, v in terms.items()}}
            if log is not None:
                log.add(row)
            if callback is not None:
                callback(it, row)
            if out_dir is not None and schedule.checkpoint_every and it % schedule.checkpoint_every == 0:
                save_checkpoint(out_dir / f"phase2_{it:07d}.pt", model, "phase2", it)
    finally:
        for p, flag in zip(frozen, flags):
            p.requires_grad_(flag)
    model.eval()
    return model


def make_sampler(images: Sequence[np.ndarray], cfg: Config, offset: int = 0) -> PatchSampler:
    return PatchSampler(images, cfg.network.patch, cfg.synth, seed=cfg.seed + offset)


def train(model: FMRNet, images: Sequence[np.ndarray], cfg: Config, phase: str = "all",
          out_dir: str | os.PathLike | None = None,
          callback: Callable[[int, dict[str, float]], None] | None = None) -> FMRNet:
    """Run phase 1, memory establishment and/or phase 2 as selected by ``phase``."""
    torch.manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    log = TrainLog(path=out / "losses.csv" if out is not None else None)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if phase in ("1", "all"):
            train_phase1(model, make_sampler(images, cfg, 1), cfg.train, cfg.weights,
                         log=log, out_dir=out, callback=callback)
            build_memory(model, images, cfg.train, seed=cfg.seed)
        if phase in ("2", "all"):
            if model.memory is None:
                build_memory(model, images, cfg.train, seed=cfg.seed)
            train_phase2(model, make_sampler(images, cfg, 2), cfg.train, cfg.weights,
                         log=log, out_dir=out, callback=callback)
    finally:
        log.flush()
    return model
