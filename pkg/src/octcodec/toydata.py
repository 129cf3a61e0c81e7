"""Synthetic piecewise-smooth RGB images for desk-scale experiments."""

from __future__ import annotations

import numpy as np


def toy_image(seed: int, height: int = 128, width: int = 128, shapes: int = 6) -> np.ndarray:
    """A (3, h, w) float32 image on [0, 1]: a colour gradient with overlaid discs and boxes."""
    rng = np.random.default_rng([seed, 7])
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    c0, cx, cy = rng.uniform(0.2, 0.8, 3), rng.uniform(-0.3, 0.3, 3), rng.uniform(-0.3, 0.3, 3)
    img = c0[:, None, None] + cx[:, None, None] * xx + cy[:, None, None] * yy
    for _ in range(shapes):
        colour = rng.uniform(0, 1, 3)[:, None, None]
        r0, c0_ = rng.uniform(0, 1, 2)
        size = rng.uniform(0.08, 0.3)
        if rng.random() < 0.5:
            inside = (yy - r0) ** 2 + (xx - c0_) ** 2 < size**2
        else:
            inside = (np.abs(yy - r0) < size) & (np.abs(xx - c0_) < size * rng.uniform(0.4, 1.5))
        img = np.where(inside, colour, img)
    # a little texture so the high band has something to code
    freq = rng.uniform(4, 12)
    img += 0.04 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy))[None]
    return np.clip(img, 0, 1).astype(np.float32)


def toy_dataset(count: int, seed: int = 0, height: int = 128, width: int = 128) -> list[np.ndarray]:
    return [toy_image(seed * 100003 + i, height, width) for i in range(count)]
