"""Contrastive memory feature module: latent loss, memory bank and scoring."""
from __future__ import annotations

import hashlib
import logging

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class MemoryBank:
    """``L x K`` matrix of normal latent prototypes; read-only once built."""

    __slots__ = ("_entries", "_tensors", "encoder_fingerprint")

    def __init__(self, entries: np.ndarray, encoder_fingerprint: str = ""):
        arr = np.array(entries, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError(f"memory entries must be a non-empty L x K matrix, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "_entries", arr)
        object.__setattr__(self, "_tensors", {})
        object.__setattr__(self, "encoder_fingerprint", encoder_fingerprint)

    def __setattr__(self, name, value):
        raise AttributeError("MemoryBank is immutable")

    def __delattr__(self, name):
        raise AttributeError("MemoryBank is immutable")

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def size(self) -> int:
        return self._entries.shape[0]

    @property
    def dim(self) -> int:
        return self._entries.shape[1]

    def tensor(self, dtype=torch.float32, device=None) -> torch.Tensor:
        """A fresh tensor copy of the entries (mutating it leaves the bank intact)."""
        key = (dtype, str(device))
        if key not in self._tensors:
            self._tensors[key] = torch.tensor(self._entries, dtype=dtype, device=device)
        return self._tensors[key].clone()

    def digest(self) -> str:
        return hashlib.sha256(self._entries.tobytes()).hexdigest()


def latent_loss(r0: torch.Tensor, r_pos: torch.Tensor, r_neg: torch.Tensor,
                classifier, reduction: str = "mean") -> torch.Tensor:
    """BCE of the classifier on (positive=1, negative=0) plus ``||R+ - R0||_2``.

    The BCE is averaged over the two classifications of each triplet; rows of
    the inputs are independent triplets. ``reduction="none"`` returns one
    value per triplet.
    """
    if not r0.shape == r_pos.shape == r_neg.shape:
        raise ValueError("triplet latents must share one shape")
    p_pos = classifier(r_pos).reshape(-1)
    p_neg = classifier(r_neg).reshape(-1)
    if not (torch.isfinite(p_pos).all() and torch.isfinite(p_neg).all()):
        raise FloatingPointError("non-finite auxiliary classifier output")
    bce = 0.5 * (F.binary_cross_entropy(p_pos, torch.ones_like(p_pos), reduction="none")
                 + F.binary_cross_entropy(p_neg, torch.zeros_like(p_neg), reduction="none"))
    dist = torch.linalg.vector_norm((r_pos - r0).reshape(len(p_pos), -1), dim=1)
    per = bce + dist
    return per.mean() if reduction == "mean" else per


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; empty clusters take the farthest point.

    Returns ``(centroids, labels)``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"{n} samples cannot fill {k} clusters; use a smaller memory size")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centroids[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[i:i + 1])[:, 0])

    labels = np.zeros(n, dtype=np.int64)
    for it in range(max_iter):
        d = _sq_dists(x, centroids)
        labels = d.argmin(1)
        point_cost = d[np.arange(n), labels]
        new = np.zeros_like(centroids)
        counts = np.bincount(labels, minlength=k)
        np.add.at(new, labels, x)
        taken: set[int] = set()
        for j in range(k):
            if counts[j]:
                new[j] /= counts[j]
            else:
                order = np.argsort(-point_cost)
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new[j] = x[far]
                point_cost[far] = 0.0
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift <= tol:
            break
    labels = _sq_dists(x, centroids).argmin(1)
    return centroids, labels


def establish_memory(latents: np.ndarray, size: int, seed: int = 0, max_iter: int = 100,
                     encoder_fingerprint: str = "") -> MemoryBank:
    """Cluster normal latent vectors and keep the centroids as a memory bank."""
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) < size:
        raise ValueError(f"only {len(latents)} latent vectors for a memory of {size} entries; "
                         "use a smaller memory size")
    centroids, _ = kmeans(latents, size, seed=seed, max_iter=max_iter)
    logger.info("memory bank established: %d entries of dim %d", *centroids.shape)
    return MemoryBank(centroids, encoder_fingerprint)


def substitute(query: torch.Tensor, memory: MemoryBank | torch.Tensor) -> torch.Tensor:
    """Convex combination ``Q @ M`` of memory entries."""
    m = memory.tensor(query.dtype, query.device) if isinstance(memory, MemoryBank) else memory
    if query.shape[-1] != m.shape[0]:
        raise ValueError(f"query length {query.shape[-1]} != memory size {m.shape[0]}")
    return query @ m


def patch_anomaly_score(z: torch.Tensor, memory: MemoryBank | torch.Tensor) -> torch.Tensor:
    """Euclidean distance from each latent row to its nearest memory entry."""
    m = memory.tensor(z.dtype, z.device) if isinstance(memory, MemoryBank) else memory
    z2 = z.reshape(-1, m.shape[1])
    d = torch.cdist(z2, m, compute_mode="donot_use_mm_for_euclid_dist")
    return d.min(dim=1).values
