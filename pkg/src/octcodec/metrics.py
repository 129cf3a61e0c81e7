"""Distortion and quality metrics on [0, 1] images: MSE, PSNR, MS-SSIM, MS-SSIM in dB.

``msssim_tensor`` is differentiable and serves as a training distortion;
the float helpers evaluate the same graph in float64.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import avg_pool2, conv2d
from .tensor import Tensor, clamp_min, no_grad, power, precision, relu

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
PSNR_IDENTICAL = math.inf  # sentinel for a zero-error pair


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def num_scales(h: int, w: int, max_scales: int = len(MSSSIM_WEIGHTS)) -> int:
    """Largest scale count whose coarsest image still holds one full window."""
    s = 0
    while s < max_scales and min(h, w) >> s >= WINDOW:
        s += 1
    return s


def _blur(x: Tensor, win_row: Tensor, win_col: Tensor) -> Tensor:
    # separable valid filtering of every channel independently
    n, c, h, w = x.shape
    flat = x.reshape(n * c, 1, h, w)
    out = conv2d(conv2d(flat, win_row), win_col)
    return out.reshape(n, c, out.shape[2], out.shape[3])


def _ssim_terms(x: Tensor, y: Tensor, win_row: Tensor, win_col: Tensor) -> tuple[Tensor, Tensor]:
    """Per-image, per-channel mean luminance and contrast-structure terms."""
    c1, c2 = K1**2, K2**2
    mu_x, mu_y = _blur(x, win_row, win_col), _blur(y, win_row, win_col)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = _blur(x * x, win_row, win_col) - mu_xx
    s_yy = _blur(y * y, win_row, win_col) - mu_yy
    s_xy = _blur(x * y, win_row, win_col) - mu_xy
    cs = (s_xy * 2.0 + c2) / (s_xx + s_yy + c2)
    lum = (mu_xy * 2.0 + c1) / (mu_xx + mu_yy + c1)
    return (lum * cs).mean(axis=(2, 3)), cs.mean(axis=(2, 3))


def _even_crop(x: Tensor) -> Tensor:
    h, w = x.shape[2] // 2 * 2, x.shape[3] // 2 * 2
    if (h, w) == x.shape[2:]:
        return x
    return x[:, :, :h, :w]


def msssim_tensor(x: Tensor, y: Tensor) -> Tensor:
    """Differentiable multi-scale SSIM of two NCHW batches, averaged over images and channels.

    Five scales need both sides >= 176 pixels; smaller inputs use fewer scales
    with the leading weights renormalized to sum to one.
    """
    if x.shape != y.shape:
        raise ValueError(f"msssim: shapes differ, {x.shape} vs {y.shape}")
    if x.ndim != 4:
        raise ValueError(f"msssim expects NCHW input, got {x.shape}")
    scales = num_scales(*x.shape[2:])
    if scales == 0:
        raise ValueError(f"msssim: images {x.shape[2:]} are smaller than one {WINDOW}x{WINDOW} window")
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    if scales < len(MSSSIM_WEIGHTS):
        weights = weights / weights.sum()
    g = gaussian_window().astype(x.dtype)
    win_row = Tensor(g.reshape(1, 1, 1, WINDOW))
    win_col = Tensor(g.reshape(1, 1, WINDOW, 1))
    value = None
    for i, wt in enumerate(weights):
        ssim, cs = _ssim_terms(x, y, win_row, win_col)
        term = ssim if i == scales - 1 else cs
        # relu keeps the fractional power real; the tiny floor keeps its gradient finite
        factor = power(clamp_min(relu(term), 1e-12), float(wt))
        value = factor if value is None else value * factor
        if i < scales - 1:
            x, y = avg_pool2(_even_crop(x)), avg_pool2(_even_crop(y))
    return value.mean()


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise ValueError(f"expected a c x h x w image or an n x c x h x w batch, got {a.shape}")
    return a


def msssim(x, y) -> float:
    """MS-SSIM in float64 of two images (CHW or NCHW arrays on [0, 1])."""
    x, y = _as_batch(x), _as_batch(y)
    with no_grad(), precision(np.float64):
        return float(msssim_tensor(Tensor(x), Tensor(y)).item())


def mse(x, y) -> float:
    x, y = _as_batch(x), _as_batch(y)
    if x.shape != y.shape:
        raise ValueError(f"mse: shapes differ, {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


def psnr_from_mse(err: float) -> float:
    return PSNR_IDENTICAL if err == 0 else -10.0 * math.log10(err)


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB for a peak value of 1; identical inputs give +inf."""
    return psnr_from_mse(mse(x, y))


def msssim_db(value: float) -> float:
    """MS-SSIM on a decibel scale, -10 log10(1 - value); a perfect score maps to +inf."""
    if value >= 1.0:
        return PSNR_IDENTICAL
    return -10.0 * math.log10(1.0 - value)
