"""Dataset ingestion and the bundled synthetic generators.

Ingestion reads a directory of PNG/JPEG files into one in-memory float
tensor in [0,1]; undecodable files are skipped and counted. The synthetic
generators (Gaussian blobs on colored backgrounds, and a gray-level
quantization ladder) let the whole test and analysis pipeline run with
zero downloads.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


class DatasetError(RuntimeError):
    """No usable images could be ingested."""


@dataclass
class ImageDataset:
    """Eagerly decoded image collection, ordered by image_id."""

    images: torch.Tensor  # (N, 3, H, W) in [0,1]
    image_ids: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]


def _decode(path: Path) -> np.ndarray:
    """Decode to a float HxWxC array in [0,1], handling 16-bit grayscale."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return np.clip(arr, 0.0, 1.0)


def _resize(chw: torch.Tensor, size: int) -> torch.Tensor:
    if chw.shape[-2:] == (size, size):
        return chw
    out = F.interpolate(chw.unsqueeze(0), size=(size, size), mode="bilinear",
                        align_corners=False, antialias=True)
    return out.squeeze(0).clamp(0.0, 1.0)


def _decode_or_none(path: Path) -> np.ndarray | None:
    try:
        return _decode(path)
    except (UnidentifiedImageError, OSError, ValueError):
        return None


def ingest_dataset(root: str | Path, image_size: int, workers: int | None = None) -> ImageDataset:
    """Load every decodable PNG/JPEG under root, resized to image_size^2.

    Decoding may fan out over VARTOK_NUM_WORKERS threads; results are
    merged in sorted-path order so the dataset is deterministic either way.
    """
    root = Path(root)
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    if workers is None:
        workers = int(os.environ.get("VARTOK_NUM_WORKERS", "1"))
    if workers > 1 and len(paths) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            decoded = list(pool.map(_decode_or_none, paths))
    else:
        decoded = [_decode_or_none(p) for p in paths]
    images, ids, skipped = [], [], 0
    for p, arr in zip(paths, decoded):
        if arr is None:
            skipped += 1
            continue
        chw = torch.from_numpy(arr).permute(2, 0, 1).to(torch.float32)
        images.append(_resize(chw, image_size))
        ids.append(str(p.relative_to(root)))
    if skipped:
        log.warning("skipped %d undecodable files under %s", skipped, root)
    if not images:
        raise DatasetError(f"no usable images under {root}")
    return ImageDataset(images=torch.stack(images), image_ids=ids, skipped=skipped)


def make_blob_images(n_images: int, image_size: int, seed: int,
                     max_blobs: int = 4, min_blobs: int = 1,
                     scale_range: tuple[float, float] = (0.05, 0.25)) -> torch.Tensor:
    """Seeded Gaussian blobs on colored backgrounds, (N,3,S,S) in [0,1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64) / image_size
    out = np.empty((n_images, 3, image_size, image_size), dtype=np.float32)
    for i in range(n_images):
        img = np.tile(rng.uniform(0.05, 0.95, size=(3, 1, 1)), (1, image_size, image_size))
        for _ in range(rng.integers(min_blobs, max_blobs + 1)):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            s = rng.uniform(*scale_range)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
            color = rng.uniform(0.0, 1.0, size=(3, 1, 1))
            img = img * (1 - blob) + color * blob
        out[i] = np.clip(img, 0.0, 1.0)
    return torch.from_numpy(out)


def quantize_levels(images: torch.Tensor, levels: int) -> torch.Tensor:
    """Quantize [0,1] values to `levels` evenly spaced gray codes."""
    if levels < 2 or levels > 256:
        raise ValueError("levels must be in [2, 256]")
    q = torch.floor(images * levels).clamp(max=levels - 1)
    return q / (levels - 1)


def make_quantization_ladder(n_per_level: int, image_size: int, seed: int,
                             levels: tuple[int, ...] = (2, 4, 8, 16, 32, 64, 128, 256),
                             ) -> tuple[torch.Tensor, list[str], list[int]]:
    """Ladder dataset spanning 2..256 gray levels with rising pixel complexity.

    Rung k carries more gray levels, more spatial detail (k+1 blobs whose
    size shrinks with k), and stronger pre-quantization noise. After
    quantizing to the rung's level count, each image's contrast is scaled
    around mid-gray by a factor that grows along the ladder. The contrast
    ramp tames the coarse rungs — a full-contrast 2-level image is all
    razor edges, the hardest content for a smooth codec despite its low
    entropy — so histogram entropy, genuine pixel information, and
    reconstruction difficulty all grow together along the ladder.
    Returns (images, image_ids, level per image).
    """
    rng = np.random.default_rng(seed + 1)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    yy = yy / image_size - 0.5
    xx = xx / image_size - 0.5
    images, ids, lvls = [], [], []
    top = max(len(levels) - 1, 1)
    for k, level in enumerate(levels):
        scale = 0.35 / (k + 1) ** 0.75
        base = make_blob_images(n_per_level, image_size, seed + 1000 * k,
                                max_blobs=2 * k + 1, min_blobs=2 * k + 1,
                                scale_range=(0.6 * scale, scale))
        # a smooth color ramp spreads pixel values over many gray codes so
        # finer quantization genuinely raises the histogram entropy
        theta = rng.uniform(0, 2 * np.pi, size=n_per_level)
        ramp = np.cos(theta)[:, None, None] * yy + np.sin(theta)[:, None, None] * xx
        ramp_amp = rng.uniform(0.2, 0.5, size=(n_per_level, 3, 1, 1))
        base = base + torch.from_numpy((ramp[:, None] * ramp_amp).astype(np.float32))
        amp = 0.28 * 1.13 ** k
        noise = torch.from_numpy(
            rng.uniform(-0.5, 0.5, size=tuple(base.shape)).astype(np.float32))
        # compress the clean signal away from the [0,1] rails so the noise
        # widens the histogram instead of piling up on clamped values
        rung = (0.1 + 0.8 * base.clamp(0.0, 1.0) + amp * noise).clamp(0.0, 1.0)
        q = quantize_levels(rung, level)
        contrast = 0.075 + 0.77 * k / top
        images.append(0.5 + contrast * (q - 0.5))
        ids.extend(f"L{level:03d}_{i:03d}" for i in range(n_per_level))
        lvls.extend([level] * n_per_level)
    return torch.cat(images), ids, lvls


def save_images(images: torch.Tensor, out_dir: str | Path, prefix: str = "img") -> list[Path]:
    """Write a (N,3,H,W) [0,1] tensor as 8-bit PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    arr = (images.clamp(0, 1) * 255).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()
    for i in range(arr.shape[0]):
        p = out_dir / f"{prefix}_{i:05d}.png"
        Image.fromarray(arr[i]).save(p)
        paths.append(p)
    return paths
