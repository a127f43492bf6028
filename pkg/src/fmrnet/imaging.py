"""Image I/O, MVTec-style dataset indexing and sliding-window patching.

Images are plain ``float32`` numpy arrays of shape ``(H, W, C)`` with
intensities in ``[0, 1]`` and ``C`` in ``{1, 3}``.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


def as_image(arr: np.ndarray) -> np.ndarray:
    """Validate and normalise an array to ``(H, W, C)`` float32 in [0, 1]."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or min(arr.shape[:2]) < 1:
        raise ValueError(f"expected (H, W, C) image with C in {{1, 3}}, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("image intensities must lie in [0, 1]")
    return arr


def read_image(path: str | os.PathLike, colorspace: str = "grayscale",
               size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an image file; ``size`` is ``(H, W)`` and uses bilinear resampling."""
    mode = "L" if colorspace == "grayscale" else "RGB"
    with PILImage.open(path) as im:
        im = im.convert(mode)
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return as_image(arr)


def read_mask(path: str | os.PathLike, size: tuple[int, int] | None = None) -> np.ndarray:
    with PILImage.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), PILImage.NEAREST)
        return np.asarray(im) > 0


def write_image(path: str | os.PathLike, arr: np.ndarray, bits: int = 8) -> None:
    arr = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if bits == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit output supports single-channel maps only")
        PILImage.fromarray(np.round(arr * 65535).astype(np.uint16)).save(path)
    else:
        PILImage.fromarray(np.round(arr * 255).astype(np.uint8)).save(path)


@dataclass
class DatasetEntry:
    path: Path
    split: str
    label: str  # "good" or "defective"
    defect_type: str = "good"
    mask_path: Path | None = None
    mask_absent: bool = False


@dataclass
class DatasetIndex:
    root: Path
    entries: list[DatasetEntry]
    skipped: list[tuple[Path, str]] = field(default_factory=list)
    size: tuple[int, int] | None = None
    colorspace: str = "grayscale"

    @property
    def train(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "train"]

    @property
    def test(self) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == "test"]

    def load(self, entry: DatasetEntry) -> np.ndarray:
        return read_image(entry.path, self.colorspace, self.size)

    def load_mask(self, entry: DatasetEntry) -> np.ndarray:
        """Ground-truth mask as ``(H, W)`` bool; all-False for good or mask-absent entries."""
        if entry.mask_path is not None:
            return read_mask(entry.mask_path, self.size)
        with PILImage.open(entry.path) as im:
            w, h = im.size
        h, w = self.size or (h, w)
        return np.zeros((h, w), dtype=bool)


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _readable(path: Path) -> str | None:
    try:
        with PILImage.open(path) as im:
            im.verify()
    except Exception as exc:  # PIL raises a zoo of types for bad files
        return f"{type(exc).__name__}: {exc}"
    return None


def load_dataset(root: str | os.PathLike, layout: str = "mvtec_like",
                 size: tuple[int, int] | None = None,
                 colorspace: str = "grayscale") -> DatasetIndex:
    """Index ``root/train/good``, ``root/test/<type>`` and ``root/ground_truth/<type>``.

    Unreadable files are skipped with a warning and listed in ``skipped``.
    Masks are paired by stem (``x.png`` <-> ``x_mask.png`` or ``x.png``).
    """
    if layout != "mvtec_like":
        raise DatasetError(f"unsupported layout {layout!r}")
    root = Path(root)
    train_dir = root / "train" / "good"
    if not train_dir.is_dir():
        raise DatasetError(f"no training images: {train_dir} does not exist")

    entries: list[DatasetEntry] = []
    skipped: list[tuple[Path, str]] = []

    def admit(path: Path) -> bool:
        reason = _readable(path)
        if reason is not None:
            logger.warning("skipping unreadable image %s (%s)", path, reason)
            skipped.append((path, reason))
            return False
        return True

    for path in _images_in(train_dir):
        if admit(path):
            entries.append(DatasetEntry(path, "train", "good"))
    if not any(e.split == "train" for e in entries):
        raise DatasetError(f"no training images in {train_dir}")

    test_dir = root / "test"
    if test_dir.is_dir():
        for type_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
            defect_type = type_dir.name
            gt_dir = root / "ground_truth" / defect_type
            for path in _images_in(type_dir):
                if not admit(path):
                    continue
                if defect_type == "good":
                    entries.append(DatasetEntry(path, "test", "good"))
                    continue
                mask = None
                for cand in (f"{path.stem}_mask", path.stem):
                    hits = [gt_dir / f"{cand}{s}" for s in IMAGE_SUFFIXES]
                    mask = next((h for h in hits if h.is_file()), None)
                    if mask is not None:
                        break
                entries.append(DatasetEntry(path, "test", "defective", defect_type,
                                            mask, mask_absent=mask is None))
    return DatasetIndex(root, entries, skipped, size, colorspace)


@dataclass
class PatchGrid:
    patches: np.ndarray  # (n, P, P, C)
    origins: list[tuple[int, int]]
    source_shape: tuple[int, int]
    patch: int
    stride: int

    def __len__(self) -> int:
        return len(self.origins)


def window_starts(length: int, patch: int, stride: int) -> list[int]:
    """Window offsets along one axis; a final window is clamped flush to the border."""
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] + patch < length:
        starts.append(length - patch)
    return starts


def slice_patches(img: np.ndarray, patch: int, stride: int | None = None) -> PatchGrid:
    stride = stride or patch
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = img.shape[:2]
    if patch > min(h, w):
        raise ValueError(f"patch {patch} larger than image {h}x{w}")
    origins = [(r, c) for r in window_starts(h, patch, stride)
               for c in window_starts(w, patch, stride)]
    patches = np.stack([img[r:r + patch, c:c + patch] for r, c in origins])
    return PatchGrid(patches, origins, (h, w), patch, stride)


def reassemble(grid: PatchGrid, maps: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Stitch per-patch maps back to the source shape, averaging overlaps."""
    if len(maps) != len(grid.origins):
        raise ValueError(f"expected {len(grid.origins)} maps, got {len(maps)}")
    first = np.asarray(maps[0])
    if first.shape[:2] != (grid.patch, grid.patch):
        raise ValueError(f"map shape {first.shape} does not match patch {grid.patch}")
    h, w = grid.source_shape
    acc = np.zeros((h, w) + first.shape[2:], dtype=np.float64)
    count = np.zeros((h, w) + (1,) * (first.ndim - 2), dtype=np.float64)
    p = grid.patch
    for (r, c), m in zip(grid.origins, maps):
        m = np.asarray(m)
        if m.shape != first.shape:
            raise ValueError("all per-patch maps must share one shape")
        acc[r:r + p, c:c + p] += m
        count[r:r + p, c:c + p] += 1
    return acc / count


def inject_speckle(img: np.ndarray, p: float, seed: int) -> np.ndarray:
    """Replace each pixel by a uniform draw with probability ``p``."""
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    hit = rng.random(img.shape[:2]) < p
    noise = rng.random(img.shape).astype(img.dtype)
    return np.where(hit[..., None] if img.ndim == 3 else hit, noise, img)
