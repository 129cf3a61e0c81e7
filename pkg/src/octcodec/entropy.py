"""Quantization, conditional Gaussian and factorized likelihoods, rate estimation.

Differentiable versions operate on :class:`Tensor`; the ``*_pmf`` helpers are
plain numpy and feed the range coder, which needs identical tables on both
sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .layers import Module
from .tensor import (Tensor, clamp_min, default_dtype, log, make, normal_cdf, round_half_away, softplus,
                     note_branch, straight_through, tabs)

SIGMA_MIN = 0.11
LIKELIHOOD_FLOOR = 1e-9
PRIOR_RANGE = 30  # support [-L, L]
PRIOR_KNOTS = 2 * PRIOR_RANGE + 1

TRAIN_NOISE = "train_noise"
TEST_ROUND = "test_round"


def quantize(y: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Uniform-noise proxy (training) or rounding half away from zero (test).

    Rounding passes gradients straight through so that it can sit inside a
    differentiable graph.
    """
    if mode == TRAIN_NOISE:
        if rng is None:
            raise ValueError("train_noise quantization needs an rng")
        noise = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype)
        return y + Tensor(noise)
    if mode == TEST_ROUND:
        return straight_through(y, round_half_away(y.data))
    raise ValueError(f"unknown quantizer mode {mode!r}")


@dataclass
class GaussianParams:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ in shape")


def sigma_from_raw(raw: Tensor, sigma_min: float = SIGMA_MIN) -> Tensor:
    return raw.exp() + sigma_min


def gaussian_likelihood(y_hat: Tensor, gp: GaussianParams, floor: float = LIKELIHOOD_FLOOR) -> Tensor:
    """P(bin of width 1 centred on y_hat) under N(mu, sigma^2), clamped below by ``floor``.

    Evaluated on the lower tail (|y - mu|) for accuracy far from the mean.
    """
    if y_hat.shape != gp.mu.shape:
        raise ValueError(f"latent {y_hat.shape} and Gaussian parameters {gp.mu.shape} differ in shape")
    v = tabs(y_hat - gp.mu)
    upper = normal_cdf((0.5 - v) / gp.sigma)
    lower = normal_cdf((-0.5 - v) / gp.sigma)
    return clamp_min(upper - lower, floor)


def gaussian_pmf(mu: np.ndarray, sigma: np.ndarray, bound: int) -> np.ndarray:
    """Probabilities of symbols [low-escape, -B..B, high-escape] per element, in float64.

    Shape is ``mu.shape + (2B + 3,)``; escape bins carry the two tail masses.
    """
    mu = np.asarray(mu, np.float64)[..., None]
    sigma = np.asarray(sigma, np.float64)[..., None]
    edges = np.arange(-bound - 0.5, bound + 1.0, 1.0)  # 2B+2 bin edges
    z = (edges - mu) / sigma
    cdf = special.ndtr(z)
    sf = special.ndtr(-z)
    # difference whichever tail is small, so far-from-mean bins keep their precision
    above = z[..., :-1] >= 0
    inner = np.where(above, sf[..., :-1] - sf[..., 1:], cdf[..., 1:] - cdf[..., :-1])
    low = cdf[..., :1]
    high = sf[..., -1:]
    return np.concatenate([low, inner, high], axis=-1)


class FactorizedPrior(Module):
    """Per-channel piecewise-linear CDF on [-L, L] with knots at every integer.

    Knot heights are cumulative sums of softplus-normalized increments, so the
    CDF is 0 at -L, 1 at L and non-decreasing by construction.
    """

    def __init__(self, channels: int, support: int = PRIOR_RANGE, floor: float = LIKELIHOOD_FLOOR):
        self.channels = channels
        self.support = support
        self.floor = floor
        # softplus(raw) equal everywhere gives the uniform density
        raw = np.full((channels, 2 * support), np.log(np.e - 1.0), dtype=default_dtype())
        self.raw = Tensor(raw, requires_grad=True)
        self.overflow = 0

    def increments(self) -> Tensor:
        d = softplus(self.raw)
        return d / d.sum(axis=1, keepdims=True)

    def cdf(self, t: Tensor) -> Tensor:
        return _piecewise_cdf(t, self.increments(), self.support)

    def likelihood(self, z_hat: Tensor) -> Tensor:
        if z_hat.shape[1] != self.channels:
            raise ValueError(f"prior has {self.channels} channels, latent has shape {z_hat.shape}")
        outside = np.abs(z_hat.data) > self.support + 0.5
        self.overflow += int(outside.sum())
        d = self.increments()
        p = _piecewise_cdf(z_hat + 0.5, d, self.support) - _piecewise_cdf(z_hat - 0.5, d, self.support)
        return clamp_min(p, self.floor)

    def pmf_table(self) -> np.ndarray:
        """(channels, 2L+1) float64 pmf of the integer bins -L..L."""
        d = self.increments().data.astype(np.float64)
        zero = np.zeros((self.channels, 1))
        pmf = 0.5 * (np.concatenate([zero, d], axis=1) + np.concatenate([d, zero], axis=1))
        return pmf


def factorized_likelihood(z_hat: Tensor, prior: FactorizedPrior) -> Tensor:
    return prior.likelihood(z_hat)


def _piecewise_cdf(t: Tensor, d: Tensor, support: int) -> Tensor:
    """Linear interpolation of knot heights cumsum(d) at t, channel-wise (axis 1)."""
    c, segs = d.shape
    u = np.clip(t.data.astype(np.float64) + support, 0.0, segs)
    idx = np.minimum(np.floor(u), segs - 1).astype(np.int64)
    frac = u - idx
    ch = np.arange(c).reshape((1, c) + (1,) * (t.ndim - 2))
    ch = np.broadcast_to(ch, t.shape)
    dd = d.data.astype(np.float64)
    knots = np.concatenate([np.zeros((c, 1)), np.cumsum(dd, axis=1)], axis=1)
    out = knots[ch, idx] + frac * dd[ch, idx]
    inside = (u > 0) & (u < segs)
    note_branch(np.where(inside, idx, -1))

    def bw(g):
        g = g.astype(np.float64)
        gt = np.where(inside, g * dd[ch, idx], 0.0)
        below = np.zeros((c, segs))  # sum of g over elements with idx > j
        at = np.zeros((c, segs))
        np.add.at(below, (ch.ravel(), idx.ravel()), g.ravel())
        np.add.at(at, (ch.ravel(), idx.ravel()), (g * frac).ravel())
        # knots[idx] = sum_{j < idx} d_j, so d_j collects g from every idx > j
        suffix = np.cumsum(below[:, ::-1], axis=1)[:, ::-1]
        gd = np.concatenate([suffix[:, 1:], np.zeros((c, 1))], axis=1) + at
        return gt, gd

    return make(out.astype(t.dtype), (t, d), bw, "piecewise_cdf")


def rate_bits(*likelihoods: Tensor) -> Tensor:
    """Total information content sum(-log2 p) over all given likelihood tensors."""
    total = None
    for p in likelihoods:
        if np.any(p.data <= 0):
            raise ValueError("likelihoods must be strictly positive")
        bits = (log(p) * (-1.0 / np.log(2.0))).sum()
        total = bits if total is None else total + bits
    if total is None:
        return Tensor(0.0)
    return total
