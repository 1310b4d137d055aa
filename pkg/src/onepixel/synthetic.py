"""Synthetic stand-ins for stained tissue tiles, for demos and offline tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import RgbImage, write_png


def tissue_tile(rng: np.random.Generator, width: int = 64, height: int = 64) -> RgbImage:
    """Noisy purple/blue tile resembling a stained tissue patch.

    Channel ranges keep every pixel far (in L1) from yellow and white, so the
    default planted oracle sees no trigger in an unperturbed tile.
    """
    r = rng.integers(60, 161, (height, width))
    g = rng.integers(20, 101, (height, width))
    b = rng.integers(140, 231, (height, width))
    # a few darker nuclei-like blobs
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        rad = rng.uniform(3, max(4, min(width, height) / 6))
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
        r = np.where(blob, r // 2, r)
        g = np.where(blob, g // 2, g)
    return RgbImage(np.stack([r, g, b], axis=-1))


def write_dataset(root, n_mitosis: int, n_normal: int = 0, seed: int = 0, size: int = 64) -> Path:
    """Write ``root/mitosis/*.png`` and ``root/normal/*.png``; returns ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for label, count in (("mitosis", n_mitosis), ("normal", n_normal)):
        (root / label).mkdir(parents=True, exist_ok=True)
        for i in range(count):
            write_png(tissue_tile(rng, size, size), root / label / f"{label[0]}{i:04d}.png")
    return root
