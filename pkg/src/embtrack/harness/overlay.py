"""RGB visualisations of embeddings and label maps."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def embedding_rgb(embedding: np.ndarray, dims=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Map three embedding dimensions of a (d, H, W) map to uint8 RGB.

    ``dims`` defaults to three randomly chosen dimensions. Each channel is
    min-max scaled independently.
    """
    d = embedding.shape[0]
    if dims is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = rng.choice(d, size=min(3, d), replace=False)
    ch = [embedding[int(i)] for i in dims]
    while len(ch) < 3:
        ch.append(np.zeros_like(embedding[0]))
    rgb = np.stack(ch, axis=-1).astype(np.float64)
    lo = rgb.min(axis=(0, 1), keepdims=True)
    hi = rgb.max(axis=(0, 1), keepdims=True)
    rgb = (rgb - lo) / np.where(hi > lo, hi - lo, 1.0)
    return (rgb * 255 + 0.5).astype(np.uint8)


def label_rgb(labels: np.ndarray, seed: int = 0) -> np.ndarray:
    """Stable pseudo-random colour per id; background stays black."""
    n = int(labels.max(initial=0)) + 1
    lut = np.random.default_rng(seed).integers(40, 256, size=(n, 3)).astype(np.uint8)
    lut[0] = 0
    return lut[labels]


def save_rgb(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(str(path))
