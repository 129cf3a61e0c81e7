"""Convolution, transposed convolution, masked convolution, GDN and friends.

The functional primitives operate on NCHW :class:`Tensor` inputs; the
``Module`` classes own parameters and mirror the usual layer API.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import flops
from .tensor import Tensor, default_dtype, make, leaky_relu as _leaky_relu, sqrt

BETA_MIN = 1e-6
GAMMA_MIN = 0.0


# -- raw kernels ------------------------------------------------------------
def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(N, C, oh, ow, kh, kw) view of strided kernel windows."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    """Cross-correlation of padded input (N,C,H,W) with w (O,C,kh,kw)."""
    win = _windows(xp, w.shape[2], w.shape[3], stride, oh, ow)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, oh, ow, O
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, full_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_correlate`: spread g (N,O,oh,ow) back through w (O,C,kh,kw)."""
    n, _, oh, ow = g.shape
    _, c, kh, kw = w.shape
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, oh, ow, C, kh, kw
    out = np.zeros((n, c) + tuple(full_hw), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def tconv_output_size(n: int, k: int, stride: int, padding: int, output_padding: int = 0) -> int:
    return (n - 1) * stride - 2 * padding + k + output_padding


def _dry_output(shape, dtype, bias) -> Tensor:
    # shape-only stand-in used while counting FLOPs; bias keeps GDN denominators positive
    out = np.zeros(shape, dtype=dtype)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    return Tensor(out)


# -- functional ops -----------------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           tag: str = "conv") -> Tensor:
    """2-d cross-correlation (no kernel flip) of NCHW ``x`` with ``weight`` [O, C, kh, kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    oh, ow = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output size non-positive for input {x.shape}, kernel {weight.shape}, "
                         f"stride {stride}, padding {padding}")
    counter = flops.active()
    if counter is not None:
        if tag == "conv" and kh == kw == 1:
            tag = "conv1x1"
        counter.add(tag, n * oh * ow * o * c * kh * kw)
        if counter.dry_run:
            return _dry_output((n, o, oh, ow), x.dtype, bias)

    xp = _pad(x.data, padding)
    out = _correlate(xp, weight.data, stride, oh, ow)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gx = _scatter(g, weight.data, stride, xp.shape[2:])
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            win = _windows(xp, kh, kw, stride, oh, ow)
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, bw, "conv2d")


def tconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
            output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is [C_in, C_out, kh, kw].

    Forward equals the input-gradient of :func:`conv2d` with the same kernel.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"tconv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"tconv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if output_padding >= stride and output_padding > 0:
        raise ValueError("output_padding must be smaller than stride")
    oh = tconv_output_size(h, kh, stride, padding, output_padding)
    ow = tconv_output_size(w, kw, stride, padding, output_padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"tconv2d output size non-positive for input {x.shape}, kernel {weight.shape}")
    counter = flops.active()
    if counter is not None:
        counter.add("tconv", n * h * w * o * c * kh * kw)
        if counter.dry_run:
            return _dry_output((n, o, oh, ow), x.dtype, bias)

    full = ((h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding)
    # [C_in, C_out, k, k] is exactly the kernel of a forward conv from C_out to C_in
    wt = weight.data
    out = _scatter(x.data, wt, stride, full)[:, :, padding : padding + oh, padding : padding + ow]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def _grad_full(g):
        gf = np.zeros((n, o) + full, dtype=g.dtype)
        gf[:, :, padding : padding + oh, padding : padding + ow] = g
        return gf

    def bw(g):
        gx = gw = gb = None
        gf = _grad_full(g)
        if x.requires_grad:
            gx = _correlate(gf, wt, stride, h, w)
        if weight.requires_grad:
            win = _windows(gf, kh, kw, stride, h, w)  # N, C_out, h, w, kh, kw
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make(out, inputs, bw, "tconv2d")


def causal_mask(k: int, out_ch: int, in_ch: int) -> np.ndarray:
    """Type-A raster mask: taps strictly before the kernel centre are 1."""
    if k % 2 != 1:
        raise ValueError(f"masked convolution needs an odd kernel, got {k}")
    m = np.zeros((k, k), dtype=np.float64)
    c = k // 2
    m[:c, :] = 1
    m[c, :c] = 1
    return np.broadcast_to(m, (out_ch, in_ch, k, k)).copy()


def _check_type_a(mask: np.ndarray) -> None:
    k = mask.shape[-1]
    ref = causal_mask(k, 1, 1)[0, 0]
    if mask.shape[-2] != k or not np.all(mask == ref):
        raise ValueError("mask is not a type-A causal mask")


def masked_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, mask: np.ndarray) -> Tensor:
    """Stride-1 'same' convolution with kernel * mask; masked taps get zero gradient."""
    _check_type_a(mask)
    k = weight.shape[-1]
    w = weight * Tensor(mask.astype(weight.dtype))
    return conv2d(x, w, bias, 1, k // 2, tag="masked")


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); multiplies instead when ``inverse``.

    ``beta`` and ``gamma`` are the effective (already positive) parameters.
    """
    c = x.shape[1]
    if beta.shape != (c,) or gamma.shape != (c, c):
        raise ValueError(f"gdn parameter shapes {beta.shape}, {gamma.shape} do not match {c} channels")
    norm = conv2d(x * x, gamma.reshape(c, c, 1, 1), beta, tag="gdn")
    norm = sqrt(norm)
    return x * norm if inverse else x / norm


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return _leaky_relu(x, slope)


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    if flops.dry_run():
        return Tensor(np.zeros((n, c, h // 2, w // 2), dtype=x.dtype))
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def upsample_nearest2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return make(out, (x,), bw, "upsample_nearest2")


# -- parameter initialisation -------------------------------------------------
def init_params(kind: str, in_ch: int, out_ch: int, k: int, seed, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Kernel with variance 1/(3 fan_in) and zero bias for a conv or tconv layer.

    A stride-s transposed convolution feeds each output from only k^2/s^2 taps
    per input channel, so its effective fan-in is divided by s^2.  ``seed`` may
    be an int or a ``numpy.random.Generator``; ints give bit-identical
    parameters on every call.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fan_in = in_ch * k * k / (stride * stride if kind == "tconv" else 1)
    std = math.sqrt(1.0 / (3.0 * fan_in)) if fan_in else 0.0
    if kind == "conv":
        shape = (out_ch, in_ch, k, k)
    elif kind == "tconv":
        shape = (in_ch, out_ch, k, k)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    weight = (rng.standard_normal(shape) * std).astype(default_dtype())
    return weight, np.zeros(out_ch, dtype=default_dtype())


# -- modules ------------------------------------------------------------------
class Module:
    """Minimal parameter container; parameters are ``Tensor`` attributes with requires_grad."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Convert every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Identity(Module):
    def forward(self, x):
        return x


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.2):
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int | None = None, rng=0):
        w, b = init_params("conv", in_ch, out_ch, k, rng)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    @property
    def in_ch(self):
        return self.weight.shape[1]

    @property
    def out_ch(self):
        return self.weight.shape[0]

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int | None = None,
                 output_padding: int | None = None, rng=0):
        w, b = init_params("tconv", in_ch, out_ch, k, rng, stride)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.output_padding = stride - 1 if output_padding is None else output_padding

    def forward(self, x):
        return tconv2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class MaskedConv2d(Module):
    """k x k stride-1 convolution whose output at a raster position only sees earlier positions."""

    def __init__(self, in_ch: int, out_ch: int, k: int = 5, rng=0):
        w, b = init_params("conv", in_ch, out_ch, k, rng)
        self.mask = causal_mask(k, out_ch, in_ch)
        self.weight = Tensor((w * self.mask).astype(w.dtype), requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def forward(self, x):
        return masked_conv2d(x, self.weight, self.bias, self.mask)


class GDN(Module):
    """Generalized divisive normalization with (raw^2 + floor) reparameterisation."""

    def __init__(self, channels: int, inverse: bool = False, beta_min: float = BETA_MIN,
                 gamma_init: float = 0.1):
        dt = default_dtype()
        self.inverse = inverse
        self.beta_min = beta_min
        self.beta_raw = Tensor(np.full(channels, math.sqrt(1.0 - beta_min), dtype=dt), requires_grad=True)
        # off-diagonal raw values start small but non-zero so they still receive gradient
        gamma = np.full((channels, channels), 1e-3, dtype=dt)
        np.fill_diagonal(gamma, math.sqrt(gamma_init))
        self.gamma_raw = Tensor(gamma, requires_grad=True)

    @property
    def beta(self) -> Tensor:
        return self.beta_raw * self.beta_raw + self.beta_min

    @property
    def gamma(self) -> Tensor:
        return self.gamma_raw * self.gamma_raw + GAMMA_MIN

    def forward(self, x):
        return gdn(x, self.beta, self.gamma, self.inverse)
