"""Global feature rearrangement: rewrite skip features as mixtures of textons.

All tensors are batched ``(B, C, H, W)``. A texton bank is the set of
non-overlapping ``K x K`` blocks of a memory-generated feature map, stored as
``(B, N, C, K, K)`` in row-major block order.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-8


def decompose_textons(fmap: torch.Tensor, k: int = 2) -> torch.Tensor:
    b, c, h, w = fmap.shape
    if h % k or w % k:
        raise ValueError(f"feature map {h}x{w} not divisible by texton size {k}")
    cols = F.unfold(fmap, kernel_size=k, stride=k)  # (B, C*k*k, N)
    return cols.transpose(1, 2).reshape(b, -1, c, k, k)


def assemble_textons(bank: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Inverse of :func:`decompose_textons`."""
    b, n, c, k, _ = bank.shape
    cols = bank.reshape(b, n, c * k * k).transpose(1, 2)
    return F.fold(cols, (height, width), kernel_size=k, stride=k)


def _unit(x: torch.Tensor, dim: int) -> torch.Tensor:
    # zero-norm vectors map to zero so their cosine with anything is 0
    norm = x.norm(dim=dim, keepdim=True)
    safe = torch.where(norm < NORM_EPS, torch.ones_like(norm), norm)
    return torch.where(norm < NORM_EPS, torch.zeros_like(x), x / safe)


def cosine_scores(skip: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Cosine between each stride-K window of ``skip`` and each texton: ``(B, N, h, w)``."""
    b, c, h, w = skip.shape
    n, k = bank.shape[1], bank.shape[3]
    if bank.shape[2] != c:
        raise ValueError(f"channel mismatch: skip has {c}, textons have {bank.shape[2]}")
    if h % k or w % k:
        raise ValueError(f"skip map {h}x{w} not divisible by texton size {k}")
    windows = _unit(F.unfold(skip, kernel_size=k, stride=k), dim=1)  # (B, CKK, L)
    filters = _unit(bank.reshape(b, n, c * k * k), dim=2)          # (B, N, CKK)
    return torch.bmm(filters, windows).reshape(b, n, h // k, w // k)


def similarity(skip: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Softmax over textons of the windowed cosine scores."""
    return torch.softmax(cosine_scores(skip, bank), dim=1)


def uniform_kernel(size: int = 3, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.full((1, 1, size, size), 1.0 / size ** 2, dtype=dtype, device=device)


def smooth_similarity(sim: torch.Tensor, kernel: torch.Tensor | None = None) -> torch.Tensor:
    """Convolve every similarity map with the same small kernel (replicate padding)."""
    if kernel is None:
        kernel = uniform_kernel(3, sim.dtype, sim.device)
    b, n, h, w = sim.shape
    pad = kernel.shape[-1] // 2
    flat = F.pad(sim.reshape(b * n, 1, h, w), (pad, pad, pad, pad), mode="replicate")
    return F.conv2d(flat, kernel).reshape(b, n, h, w)


def rearrange(sim: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Transposed stride-K convolution of each map by its texton, summed over textons."""
    b, n, h, w = sim.shape
    if bank.shape[:2] != (b, n):
        raise ValueError(f"similarity stack {tuple(sim.shape)} does not match bank {tuple(bank.shape)}")
    c, k = bank.shape[2], bank.shape[3]
    cols = torch.bmm(bank.reshape(b, n, c * k * k).transpose(1, 2), sim.reshape(b, n, h * w))
    return F.fold(cols, (h * k, w * k), kernel_size=k, stride=k)


def hard_assignment(sim: torch.Tensor) -> torch.Tensor:
    """One-hot argmax over the texton axis."""
    idx = sim.argmax(dim=1, keepdim=True)
    return torch.zeros_like(sim).scatter_(1, idx, 1.0)


class GFRM(nn.Module):
    """Texton rearrangement of a skip feature map against a memory-generated map.

    With ``trainable=False`` the smoothing kernel is a fixed 3x3 mean and the
    module holds no parameters.
    """

    def __init__(self, texton_size: int = 2, trainable: bool = False, kernel_size: int = 3):
        super().__init__()
        self.texton_size = texton_size
        self.trainable = trainable
        kernel = uniform_kernel(kernel_size)
        if trainable:
            self.kernel = nn.Parameter(kernel)
        else:
            self.register_buffer("kernel", kernel, persistent=False)

    def forward(self, skip: torch.Tensor, memory_map: torch.Tensor) -> torch.Tensor:
        bank = decompose_textons(memory_map, self.texton_size)
        if self.trainable:
            kernel = self.kernel.to(skip)
        else:
            # rebuilt in the input precision so the fixed mean stays exact in float64
            kernel = uniform_kernel(self.kernel.shape[-1], skip.dtype, skip.device)
        sim = smooth_similarity(similarity(skip, bank), kernel)
        return rearrange(sim, bank)
