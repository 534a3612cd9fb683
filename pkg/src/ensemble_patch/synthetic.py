"""Synthetic labelled scenes for the toy detectors.

Each scene is a low-chroma noisy background with one or two red "person"
rectangles (class 0) and, sometimes, a blue distractor (class 1).
"""
from __future__ import annotations

import numpy as np
import torch

from .transforms import BoundingBox, LabeledImage

__all__ = ["make_scene", "make_dataset"]


def make_scene(rng: np.random.Generator, size: int = 64, max_persons: int = 1,
               distractor_prob: float = 0.3, dtype=torch.float64) -> LabeledImage:
    base = rng.uniform(0.3, 0.7)
    img = base + rng.normal(0.0, 0.03, size=(3, size, size))
    img += rng.normal(0.0, 0.02, size=(1, size, size))
    boxes = []
    for _ in range(int(rng.integers(1, max_persons + 1))):
        bw = rng.uniform(0.3, 0.4)
        bh = rng.uniform(0.55, 0.75)
        cx = rng.uniform(bw / 2, 1 - bw / 2)
        cy = rng.uniform(bh / 2, 1 - bh / 2)
        x0, x1 = int(round((cx - bw / 2) * size)), int(round((cx + bw / 2) * size))
        y0, y1 = int(round((cy - bh / 2) * size)), int(round((cy + bh / 2) * size))
        color = np.array([rng.uniform(0.75, 0.9), rng.uniform(0.2, 0.35), rng.uniform(0.2, 0.35)])
        img[:, y0:y1, x0:x1] = color[:, None, None] + rng.normal(0, 0.03, size=(3, y1 - y0, x1 - x0))
        boxes.append(BoundingBox(0, (x0 + x1) / (2 * size), (y0 + y1) / (2 * size),
                                 (x1 - x0) / size, (y1 - y0) / size))
    if rng.random() < distractor_prob:
        s = rng.uniform(0.1, 0.2)
        cx, cy = rng.uniform(s / 2, 1 - s / 2, size=2)
        x0, x1 = int(round((cx - s / 2) * size)), int(round((cx + s / 2) * size))
        y0, y1 = int(round((cy - s / 2) * size)), int(round((cy + s / 2) * size))
        img[:, y0:y1, x0:x1] = np.array([0.2, 0.3, 0.8])[:, None, None]
        boxes.append(BoundingBox(1, (x0 + x1) / (2 * size), (y0 + y1) / (2 * size),
                                 (x1 - x0) / size, (y1 - y0) / size))
    image = torch.as_tensor(np.clip(img, 0.0, 1.0), dtype=dtype)
    return LabeledImage(image=image, boxes=boxes)


def make_dataset(n: int, size: int = 64, seed: int = 0, max_persons: int = 1,
                 distractor_prob: float = 0.3, dtype=torch.float64) -> list:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, size, max_persons, distractor_prob, dtype) for _ in range(n)]
