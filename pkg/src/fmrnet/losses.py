"""Reconstruction, adversarial, perceptual and latent losses."""
from __future__ import annotations

from typing import Iterable, Sequence

import torch
import torch.nn as nn

from .cmfm import latent_loss

_LOG_EPS = 1e-12


def weight_matrices(modules: Iterable[nn.Module]) -> list[torch.Tensor]:
    """Convolution and linear weights (biases and norm affine params excluded)."""
    out = []
    for mod in modules:
        for m in mod.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)) and m.weight.requires_grad:
                out.append(m.weight)
    return out


def frobenius_penalty(weights: Sequence[torch.Tensor]) -> torch.Tensor:
    if not weights:
        return torch.zeros(())
    return sum(torch.linalg.vector_norm(w) for w in weights)


def loss_rec(target: torch.Tensor, recon: torch.Tensor, epsilon: float = 0.0,
             weights: Sequence[torch.Tensor] = ()) -> torch.Tensor:
    """Per-pixel mean squared error plus ``epsilon`` times summed Frobenius norms."""
    mse = torch.mean((target - recon) ** 2)
    if epsilon and weights:
        return mse + epsilon * frobenius_penalty(weights)
    return mse


def loss_gan(dis: nn.Module, real: torch.Tensor, fake: torch.Tensor,
             nonsaturating: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(generator_loss, discriminator_loss)``, both to be minimised.

    The discriminator loss is the negated value ``E log D(real) + E log(1 - D(fake))``.
    The generator loss is ``-E log D(fake)`` when ``nonsaturating`` and
    ``E log(1 - D(fake))`` otherwise.
    """
    d_real, _ = dis(real)
    d_fake, _ = dis(fake)
    value = torch.log(d_real + _LOG_EPS).mean() + torch.log(1 - d_fake + _LOG_EPS).mean()
    if nonsaturating:
        gen = -torch.log(d_fake + _LOG_EPS).mean()
    else:
        gen = torch.log(1 - d_fake + _LOG_EPS).mean()
    return gen, -value


def perceptual_distance(real_feats: Sequence[torch.Tensor], fake_feats: Sequence[torch.Tensor],
                        layers: Sequence[int], psi: float = 0.5) -> torch.Tensor:
    """``sum_l psi * ||f_l(real) - f_l(fake)||_1`` per sample, averaged over the batch.

    ``layers`` are 1-based block indices into the feature lists.
    """
    total = 0.0
    for lv in layers:
        diff = (real_feats[lv - 1] - fake_feats[lv - 1]).abs()
        total = total + psi * diff.flatten(1).sum(1)
    return total.mean()


def loss_perceptual(dis: nn.Module, real: torch.Tensor, fake: torch.Tensor,
                    layers: Sequence[int], psi: float = 0.5) -> torch.Tensor:
    with torch.no_grad():
        _, real_feats = dis(real)
    _, fake_feats = dis(fake)
    return perceptual_distance(real_feats, fake_feats, layers, psi)


def loss_adv(dis: nn.Module, real: torch.Tensor, fake: torch.Tensor, layers: Sequence[int],
             psi: float = 0.5, nonsaturating: bool = True) -> torch.Tensor:
    """Generator-side adversarial term plus perceptual term (one discriminator pass)."""
    with torch.no_grad():
        _, real_feats = dis(real)
    d_fake, fake_feats = dis(fake)
    if nonsaturating:
        gen = -torch.log(d_fake + _LOG_EPS).mean()
    else:
        gen = torch.log(1 - d_fake + _LOG_EPS).mean()
    return gen + perceptual_distance(real_feats, fake_feats, layers, psi)


def loss_discriminator(dis: nn.Module, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    return loss_gan(dis, real, fake.detach())[1]


def loss_latent_batch(r0: torch.Tensor, r_pos: torch.Tensor, r_neg: torch.Tensor,
                      classifier: nn.Module) -> torch.Tensor:
    return latent_loss(r0, r_pos, r_neg, classifier, reduction="mean")
