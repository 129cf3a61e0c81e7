"""Multi-frequency tensors and octave (transposed-)convolution units.

A unit maps an ``MFTensor`` (HF at full resolution, LF at half) to another.
``GoConv``/``GoTConv`` resample between bands with learned stride-2
(transposed) convolutions fed by the intra-band outputs; ``OctConv`` and
``OctTConv`` are the original fixed-resampling units kept as a baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import GDN, Conv2d, ConvTranspose2d, Identity, LeakyReLU, Module, avg_pool2, upsample_nearest2
from .tensor import Tensor

INTER_K = 3


def split_channels(c: int, alpha: float, allow_empty: bool = False) -> tuple[int, int]:
    """(hf, lf) channel counts with lf = round-half-up(alpha * c)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    lf = int(np.floor(alpha * c + 0.5))
    hf = c - lf
    if not allow_empty and (lf < 1 or hf < 1):
        raise ValueError(f"alpha={alpha} splits {c} channels into {hf} HF / {lf} LF; both must be >= 1")
    return hf, lf


@dataclass
class MFTensor:
    hf: Tensor
    lf: Tensor

    def __post_init__(self):
        h, w = self.hf.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"HF spatial dims must be even, got {self.hf.shape}")
        if self.lf.shape[0] != self.hf.shape[0] or self.lf.shape[2:] != (h // 2, w // 2):
            raise ValueError(f"LF shape {self.lf.shape} is not half the HF resolution {self.hf.shape}")

    @property
    def alpha(self) -> float:
        c = self.channels
        return self.lf.shape[1] / c if c else 0.0

    @property
    def channels(self) -> int:
        return self.hf.shape[1] + self.lf.shape[1]

    @property
    def split(self) -> tuple[int, int]:
        return self.hf.shape[1], self.lf.shape[1]

    @property
    def shapes(self) -> tuple[tuple, tuple]:
        return self.hf.shape, self.lf.shape

    def map(self, fn: Callable[[Tensor], Tensor]) -> "MFTensor":
        return MFTensor(fn(self.hf), fn(self.lf))


def activation(kind: str, channels: int, slope: float = 0.2) -> Module:
    """Activation module by name: ``gdn``, ``igdn``, ``leaky`` or ``identity``."""
    if kind == "gdn":
        return GDN(channels)
    if kind == "igdn":
        return GDN(channels, inverse=True)
    if kind == "leaky":
        return LeakyReLU(slope)
    if kind == "identity":
        return Identity()
    raise ValueError(f"unknown activation {kind!r}")


def _check_input(x: MFTensor, split: tuple[int, int], name: str) -> None:
    if x.split != split:
        raise ValueError(f"{name}: input channels {x.split} do not match the unit's {split}")


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _child_rng(rng: np.random.Generator):
    return np.random.default_rng(rng.integers(2**63))


class GoConv(Module):
    """Generalized octave convolution.

    ``placement='internal'`` puts an activation after each of the four
    branches; ``'outside'`` applies one per output band instead (ActOut).
    ``cross=False`` drops the inter-band paths, leaving two independent
    single-band convolutions.
    """

    def __init__(self, in_split: tuple[int, int], out_split: tuple[int, int], k: int, stride: int,
                 act: str = "identity", placement: str = "internal", cross: bool = True, slope: float = 0.2,
                 rng: np.random.Generator | int = 0):
        _check_stride(stride)
        if placement not in ("internal", "outside"):
            raise ValueError(f"unknown activation placement {placement!r}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        (hi, li), (ho, lo) = in_split, out_split
        self.in_split, self.out_split = tuple(in_split), tuple(out_split)
        self.stride, self.placement = stride, placement
        self.cross = cross and lo > 0 and ho > 0
        self.f_hh = Conv2d(hi, ho, k, stride, rng=_child_rng(rng))
        self.f_ll = Conv2d(li, lo, k, stride, rng=_child_rng(rng))
        if self.cross:
            self.f_h2l = Conv2d(ho, lo, INTER_K, 2, rng=_child_rng(rng))
            self.g_l2h = ConvTranspose2d(lo, ho, INTER_K, 2, rng=_child_rng(rng))
        if placement == "internal":
            self.act_hh, self.act_ll = activation(act, ho, slope), activation(act, lo, slope)
            if self.cross:
                self.act_l2h, self.act_h2l = activation(act, ho, slope), activation(act, lo, slope)
        else:
            self.act_h, self.act_l = activation(act, ho, slope), activation(act, lo, slope)

    def forward(self, x: MFTensor) -> MFTensor:
        _check_input(x, self.in_split, "GoConv")
        inner = self.placement == "internal"
        y_hh = self.f_hh(x.hf)
        y_ll = self.f_ll(x.lf)
        if inner:
            y_hh, y_ll = self.act_hh(y_hh), self.act_ll(y_ll)
        y_h, y_l = y_hh, y_ll
        if self.cross:
            y_l2h = self.g_l2h(y_ll)
            y_h2l = self.f_h2l(y_hh)
            if inner:
                y_l2h, y_h2l = self.act_l2h(y_l2h), self.act_h2l(y_h2l)
            y_h, y_l = y_hh + y_l2h, y_ll + y_h2l
        if not inner:
            y_h, y_l = self.act_h(y_h), self.act_l(y_l)
        return MFTensor(y_h, y_l)


class GoConvFirst(Module):
    """First encoder unit: a plain image in, Y^H = f(X), Y^L = f_down(Y^H)."""

    def __init__(self, in_ch: int, out_split: tuple[int, int], k: int, stride: int, act: str = "identity",
                 placement: str = "internal", slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        ho, lo = out_split
        self.in_ch, self.out_split = in_ch, tuple(out_split)
        # the two placements coincide here: each band has exactly one activation
        self.f = Conv2d(in_ch, ho, k, stride, rng=_child_rng(rng))
        self.f_h2l = Conv2d(ho, lo, INTER_K, 2, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, ho, slope), activation(act, lo, slope)
        self.placement = placement

    def forward(self, x: Tensor) -> MFTensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"GoConvFirst: expected {self.in_ch} input channels, got {x.shape}")
        if x.shape[2] % (2 * self.f.stride) or x.shape[3] % (2 * self.f.stride):
            raise ValueError(f"GoConvFirst: spatial dims {x.shape[2:]} must be divisible by {2 * self.f.stride}")
        y_pre = self.f(x)
        y_h = self.act_h(y_pre)
        # with internal activations the down-sampler reads the activated HF map
        y_l = self.f_h2l(y_h if self.placement == "internal" else y_pre)
        return MFTensor(y_h, self.act_l(y_l))


class GoTConv(Module):
    """Generalized octave transposed convolution; activations precede each (transposed) convolution."""

    def __init__(self, in_split: tuple[int, int], out_split: tuple[int, int], k: int, stride: int,
                 act: str = "identity", placement: str = "internal", cross: bool = True, slope: float = 0.2,
                 rng: np.random.Generator | int = 0):
        _check_stride(stride)
        if placement not in ("internal", "outside"):
            raise ValueError(f"unknown activation placement {placement!r}")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        (hi, li), (ho, lo) = in_split, out_split
        self.in_split, self.out_split = tuple(in_split), tuple(out_split)
        self.stride, self.placement = stride, placement
        self.cross = cross and lo > 0 and ho > 0
        self.g_hh = ConvTranspose2d(hi, ho, k, stride, rng=_child_rng(rng))
        self.g_ll = ConvTranspose2d(li, lo, k, stride, rng=_child_rng(rng))
        if self.cross:
            self.f_h2l = Conv2d(ho, lo, INTER_K, 2, rng=_child_rng(rng))
            self.g_l2h = ConvTranspose2d(lo, ho, INTER_K, 2, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, hi, slope), activation(act, li, slope)
        if placement == "internal" and self.cross:
            self.act_hh, self.act_ll = activation(act, ho, slope), activation(act, lo, slope)

    def forward(self, y: MFTensor) -> MFTensor:
        _check_input(y, self.in_split, "GoTConv")
        x_hh = self.g_hh(self.act_h(y.hf))
        x_ll = self.g_ll(self.act_l(y.lf))
        if not self.cross:
            return MFTensor(x_hh, x_ll)
        if self.placement == "internal":
            x_l2h = self.g_l2h(self.act_ll(x_ll))
            x_h2l = self.f_h2l(self.act_hh(x_hh))
        else:
            x_l2h, x_h2l = self.g_l2h(x_ll), self.f_h2l(x_hh)
        return MFTensor(x_hh + x_l2h, x_ll + x_h2l)


class GoTConvLast(Module):
    """Last decoder unit: X = X^{H->H} + g_up(X^{L->L}), a single tensor."""

    def __init__(self, in_split: tuple[int, int], out_ch: int, k: int, stride: int, act: str = "identity",
                 placement: str = "internal", slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        hi, li = in_split
        self.in_split, self.out_ch, self.placement = tuple(in_split), out_ch, placement
        self.g_hh = ConvTranspose2d(hi, out_ch, k, stride, rng=_child_rng(rng))
        self.g_ll = ConvTranspose2d(li, out_ch, k, stride, rng=_child_rng(rng))
        self.g_l2h = ConvTranspose2d(out_ch, out_ch, INTER_K, 2, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, hi, slope), activation(act, li, slope)
        if placement == "internal":
            self.act_ll = activation(act, out_ch, slope)

    def forward(self, y: MFTensor) -> Tensor:
        _check_input(y, self.in_split, "GoTConvLast")
        x_hh = self.g_hh(self.act_h(y.hf))
        x_ll = self.g_ll(self.act_l(y.lf))
        if self.placement == "internal":
            x_ll = self.act_ll(x_ll)
        return x_hh + self.g_l2h(x_ll)


class OctConv(Module):
    """Original octave convolution with average-pool / nearest-neighbour resampling.

    Y^H = f(X^H) + up(f(X^L)), Y^L = f(X^L) + f(pool(X^H)); the activation
    is applied to the two output bands only.
    """

    def __init__(self, in_split: tuple[int, int], out_split: tuple[int, int], k: int, stride: int,
                 act: str = "identity", slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        (hi, li), (ho, lo) = in_split, out_split
        self.in_split, self.out_split, self.stride = tuple(in_split), tuple(out_split), stride
        self.f_hh = Conv2d(hi, ho, k, stride, rng=_child_rng(rng))
        self.f_ll = Conv2d(li, lo, k, stride, rng=_child_rng(rng))
        self.f_l2h = Conv2d(li, ho, k, stride, rng=_child_rng(rng))
        self.f_h2l = Conv2d(hi, lo, k, stride, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, ho, slope), activation(act, lo, slope)

    def forward(self, x: MFTensor) -> MFTensor:
        _check_input(x, self.in_split, "OctConv")
        y_h = self.f_hh(x.hf)
        y_l = self.f_ll(x.lf)
        if x.lf.shape[1] and self.out_split[0]:
            y_h = y_h + upsample_nearest2(self.f_l2h(x.lf))
        if x.hf.shape[1] and self.out_split[1]:
            y_l = y_l + self.f_h2l(avg_pool2(x.hf))
        return MFTensor(self.act_h(y_h), self.act_l(y_l))


class OctConvFirst(Module):
    """Original octave first layer: Y^H = f(X), Y^L = f(pool(X))."""

    def __init__(self, in_ch: int, out_split: tuple[int, int], k: int, stride: int, act: str = "identity",
                 slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        ho, lo = out_split
        self.in_ch, self.out_split = in_ch, tuple(out_split)
        self.f_hh = Conv2d(in_ch, ho, k, stride, rng=_child_rng(rng))
        self.f_h2l = Conv2d(in_ch, lo, k, stride, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, ho, slope), activation(act, lo, slope)

    def forward(self, x: Tensor) -> MFTensor:
        if x.shape[1] != self.in_ch:
            raise ValueError(f"OctConvFirst: expected {self.in_ch} input channels, got {x.shape}")
        return MFTensor(self.act_h(self.f_hh(x)), self.act_l(self.f_h2l(avg_pool2(x))))


class OctTConv(Module):
    """Original octave transposed convolution (activation on the input bands).

    X^H = g(Y^H) + up(g(Y^L)), X^L = g(Y^L) + g(pool(Y^H)).
    """

    def __init__(self, in_split: tuple[int, int], out_split: tuple[int, int], k: int, stride: int,
                 act: str = "identity", slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        (hi, li), (ho, lo) = in_split, out_split
        self.in_split, self.out_split, self.stride = tuple(in_split), tuple(out_split), stride
        self.g_hh = ConvTranspose2d(hi, ho, k, stride, rng=_child_rng(rng))
        self.g_ll = ConvTranspose2d(li, lo, k, stride, rng=_child_rng(rng))
        self.g_l2h = ConvTranspose2d(li, ho, k, stride, rng=_child_rng(rng))
        self.g_h2l = ConvTranspose2d(hi, lo, k, stride, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, hi, slope), activation(act, li, slope)

    def forward(self, y: MFTensor) -> MFTensor:
        _check_input(y, self.in_split, "OctTConv")
        yh, yl = self.act_h(y.hf), self.act_l(y.lf)
        x_h = self.g_hh(yh)
        x_l = self.g_ll(yl)
        if yl.shape[1] and self.out_split[0]:
            x_h = x_h + upsample_nearest2(self.g_l2h(yl))
        if yh.shape[1] and self.out_split[1]:
            x_l = x_l + self.g_h2l(avg_pool2(yh))
        return MFTensor(x_h, x_l)


class OctTConvLast(Module):
    """Original octave last layer: X = g(Y^H) + up(g(Y^L))."""

    def __init__(self, in_split: tuple[int, int], out_ch: int, k: int, stride: int, act: str = "identity",
                 slope: float = 0.2, rng: np.random.Generator | int = 0):
        _check_stride(stride)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        hi, li = in_split
        self.in_split, self.out_ch = tuple(in_split), out_ch
        self.g_hh = ConvTranspose2d(hi, out_ch, k, stride, rng=_child_rng(rng))
        self.g_l2h = ConvTranspose2d(li, out_ch, k, stride, rng=_child_rng(rng))
        self.act_h, self.act_l = activation(act, hi, slope), activation(act, li, slope)

    def forward(self, y: MFTensor) -> Tensor:
        _check_input(y, self.in_split, "OctTConvLast")
        return self.g_hh(self.act_h(y.hf)) + upsample_nearest2(self.g_l2h(self.act_l(y.lf)))


# functional spellings
def goconv(x: MFTensor, unit: GoConv) -> MFTensor:
    return unit(x)


def gotconv(y: MFTensor, unit: GoTConv) -> MFTensor:
    return unit(y)


def goconv_first(x: Tensor, unit: GoConvFirst) -> MFTensor:
    return unit(x)


def gotconv_last(y: MFTensor, unit: GoTConvLast) -> Tensor:
    return unit(y)


def octconv_original(x: MFTensor, unit: OctConv) -> MFTensor:
    return unit(x)


def octtconv_original(y: MFTensor, unit: OctTConv) -> MFTensor:
    return unit(y)
