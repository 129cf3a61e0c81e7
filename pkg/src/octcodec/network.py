"""The multi-frequency codec graph, its FLOP counter and checkpoint files.

Core encoder: four stride-2 octave units (GDN) to latents y = {y^H, y^L} at
1/16 and 1/32 resolution.  Hyper encoder: three units (strides 1, 2, 2,
leaky ReLU) to z.  Hyper decoder mirrors it to psi with twice the latent
channels.  Per band, a 5x5 masked convolution gives the context phi and a
1x1 stack maps [psi, phi] to the Gaussian mean and scale.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import flops
from .entropy import (TEST_ROUND, TRAIN_NOISE, FactorizedPrior, GaussianParams, gaussian_likelihood, quantize,
                      rate_bits, sigma_from_raw)
from .layers import Conv2d, MaskedConv2d, Module, leaky_relu
from .octave import (GoConv, GoConvFirst, GoTConv, GoTConvLast, MFTensor, OctConv, OctConvFirst, OctTConv,
                     OctTConvLast, split_channels)
from .tensor import Tensor, concat, no_grad, round_half_away

VARIANTS = ("goconv", "actout", "coreoct", "orgoct")
CKPT_MAGIC = b"OCTC"
CKPT_VERSION = 1
IMAGE_MULTIPLE = 128  # four core strides plus two hyper strides on the half-resolution band


@dataclass(frozen=True)
class ArchConfig:
    M: int = 192
    N: int = 192
    alpha: float = 0.5
    k_core: int = 5
    k_hyper: tuple[int, int] = (3, 5)
    leaky_slope: float = 0.2
    variant: str = "goconv"
    hyper_input: str = "quantized"  # or "latent": feed unquantized y to the hyper encoder
    context_input: str = "rounded"  # or "noisy": context from the training-noise latents

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"the multi-frequency model needs 0 < alpha < 1, got {self.alpha}; "
                             "alpha=0 removes the low-frequency band entirely")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.hyper_input not in ("quantized", "latent"):
            raise ValueError(f"unknown hyper_input {self.hyper_input!r}")
        if self.context_input not in ("rounded", "noisy"):
            raise ValueError(f"unknown context_input {self.context_input!r}")
        for c in (self.M, self.N):
            split_channels(c, self.alpha)

    @property
    def latent_split(self) -> tuple[int, int]:
        return split_channels(self.M, self.alpha)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["k_hyper"] = tuple(d.get("k_hyper", (3, 5)))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


class ParamEstimator(Module):
    """1x1 conv stack [psi, phi] -> [mu, raw sigma] with leaky ReLU between layers."""

    def __init__(self, widths: list[int], slope: float, rng: np.random.Generator):
        self.layers = [Conv2d(a, b, 1, rng=np.random.default_rng(rng.integers(2**63)))
                       for a, b in zip(widths[:-1], widths[1:])]
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, self.slope)
        return x


@dataclass
class ForwardResult:
    x_tilde: Tensor
    y: MFTensor
    y_hat: MFTensor
    z_hat: MFTensor
    params: dict[str, GaussianParams]
    likelihoods: dict[str, Tensor]
    bits_h: Tensor
    bits_l: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def bits(self) -> Tensor:
        return self.bits_h + self.bits_l


class CodecModel(Module):
    def __init__(self, cfg: ArchConfig = ArchConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)

        def child():
            return np.random.default_rng(rng.integers(2**63))

        a, M, N, slope = cfg.alpha, cfg.M, cfg.N, cfg.leaky_slope
        sp = lambda c: split_channels(c, a)  # noqa: E731
        k, (k1, k2) = cfg.k_core, cfg.k_hyper
        v = cfg.variant
        placement = "outside" if v == "actout" else "internal"

        if v == "orgoct":
            self.core_enc = [OctConvFirst(3, sp(N), k, 2, "gdn", rng=child()),
                             OctConv(sp(N), sp(N), k, 2, "gdn", rng=child()),
                             OctConv(sp(N), sp(N), k, 2, "gdn", rng=child()),
                             OctConv(sp(N), sp(M), k, 2, "gdn", rng=child())]
            self.core_dec = [OctTConv(sp(M), sp(N), k, 2, "igdn", rng=child()),
                             OctTConv(sp(N), sp(N), k, 2, "igdn", rng=child()),
                             OctTConv(sp(N), sp(N), k, 2, "igdn", rng=child()),
                             OctTConvLast(sp(N), 3, k, 2, "igdn", rng=child())]
        else:
            self.core_enc = [GoConvFirst(3, sp(N), k, 2, "gdn", placement, rng=child()),
                             GoConv(sp(N), sp(N), k, 2, "gdn", placement, rng=child()),
                             GoConv(sp(N), sp(N), k, 2, "gdn", placement, rng=child()),
                             GoConv(sp(N), sp(M), k, 2, "gdn", placement, rng=child())]
            self.core_dec = [GoTConv(sp(M), sp(N), k, 2, "igdn", placement, rng=child()),
                             GoTConv(sp(N), sp(N), k, 2, "igdn", placement, rng=child()),
                             GoTConv(sp(N), sp(N), k, 2, "igdn", placement, rng=child()),
                             GoTConvLast(sp(N), 3, k, 2, "igdn", placement, rng=child())]

        mh, ml = sp(M)
        n15 = sp(int(round(1.5 * N)))
        psi_split = (2 * mh, 2 * ml)
        enc_shapes = [(sp(M), sp(N), k1, 1), (sp(N), sp(N), k2, 2), (sp(N), sp(N), k2, 2)]
        dec_shapes = [(sp(N), sp(N), k2, 2), (sp(N), n15, k2, 2), (n15, psi_split, k1, 1)]
        if v == "orgoct":
            self.hyper_enc = [OctConv(i, o, kk, s, "leaky", slope, rng=child()) for i, o, kk, s in enc_shapes]
            self.hyper_dec = [OctTConv(i, o, kk, s, "leaky", slope, rng=child()) for i, o, kk, s in dec_shapes]
        else:
            cross = v != "coreoct"
            self.hyper_enc = [GoConv(i, o, kk, s, "leaky", placement, cross, slope, rng=child())
                              for i, o, kk, s in enc_shapes]
            self.hyper_dec = [GoTConv(i, o, kk, s, "leaky", placement, cross, slope, rng=child())
                              for i, o, kk, s in dec_shapes]

        self.cm_h = MaskedConv2d(mh, 2 * mh, 5, rng=child())
        self.cm_l = MaskedConv2d(ml, 2 * ml, 5, rng=child())
        self.pe_h = ParamEstimator(_pe_widths(mh), slope, child())
        self.pe_l = ParamEstimator(_pe_widths(ml), slope, child())
        zh, zl = sp(N)
        self.prior_h = FactorizedPrior(zh)
        self.prior_l = FactorizedPrior(zl)

    # -- the six sub-networks ---------------------------------------------
    def encode_analysis(self, x: Tensor) -> MFTensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an n x 3 x h x w image batch, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ValueError(f"image dims {x.shape[2:]} must be multiples of 32")
        with flops.scope("core_enc"):
            y = self.core_enc[0](x)
            for unit in self.core_enc[1:]:
                y = unit(y)
        return y

    def decode_synthesis(self, y_hat: MFTensor) -> Tensor:
        if y_hat.split != self.cfg.latent_split:
            raise ValueError(f"latent channels {y_hat.split} do not match the model's {self.cfg.latent_split}")
        with flops.scope("core_dec"):
            for unit in self.core_dec[:-1]:
                y_hat = unit(y_hat)
            return self.core_dec[-1](y_hat)

    def hyper_analysis(self, y_hat: MFTensor) -> MFTensor:
        h, w = y_hat.lf.shape[2:]
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise ValueError(f"low-frequency latents {h}x{w} are too small for the hyper encoder; "
                             f"use image dims that are multiples of {IMAGE_MULTIPLE}")
        with flops.scope("hyper_enc"):
            for unit in self.hyper_enc:
                y_hat = unit(y_hat)
        return y_hat

    def hyper_synthesis(self, z_hat: MFTensor) -> MFTensor:
        with flops.scope("hyper_dec"):
            for unit in self.hyper_dec:
                z_hat = unit(z_hat)
        return z_hat

    def context_predict(self, y_hat_band: Tensor, band: str) -> Tensor:
        with flops.scope("context"):
            return (self.cm_h if band == "h" else self.cm_l)(y_hat_band)

    def estimate_params(self, psi_band: Tensor, phi_band: Tensor, band: str) -> GaussianParams:
        if psi_band.shape[2:] != phi_band.shape[2:] or psi_band.shape[0] != phi_band.shape[0]:
            raise ValueError(f"hyper features {psi_band.shape} and context {phi_band.shape} are misaligned")
        with flops.scope("param_est"):
            out = (self.pe_h if band == "h" else self.pe_l)(concat([psi_band, phi_band], axis=1))
        c = out.shape[1] // 2
        return GaussianParams(out[:, :c], sigma_from_raw(out[:, c:]))

    # -- end to end ---------------------------------------------------------
    def forward(self, x: Tensor, mode: str = TRAIN_NOISE, rng: np.random.Generator | None = None) -> ForwardResult:
        """One pass through the whole graph; ``mode`` selects noise or rounding quantization."""
        cfg = self.cfg
        y = self.encode_analysis(x)
        y_hat = MFTensor(quantize(y.hf, mode, rng), quantize(y.lf, mode, rng))
        z = self.hyper_analysis(y_hat if cfg.hyper_input == "quantized" else y)
        z_hat = MFTensor(quantize(z.hf, mode, rng), quantize(z.lf, mode, rng))
        psi = self.hyper_synthesis(z_hat)
        if mode == TRAIN_NOISE and cfg.context_input == "rounded":
            ctx = y.map(lambda t: quantize(t, TEST_ROUND))
        else:
            ctx = y_hat
        params = {
            "h": self.estimate_params(psi.hf, self.context_predict(ctx.hf, "h"), "h"),
            "l": self.estimate_params(psi.lf, self.context_predict(ctx.lf, "l"), "l"),
        }
        lik = {
            "y_h": gaussian_likelihood(y_hat.hf, params["h"]),
            "y_l": gaussian_likelihood(y_hat.lf, params["l"]),
            "z_h": self.prior_h.likelihood(z_hat.hf),
            "z_l": self.prior_l.likelihood(z_hat.lf),
        }
        x_tilde = self.decode_synthesis(y_hat)
        return ForwardResult(x_tilde, y, y_hat, z_hat, params, lik,
                             rate_bits(lik["y_h"], lik["z_h"]), rate_bits(lik["y_l"], lik["z_l"]))

    def forward_train(self, x: Tensor, rng: np.random.Generator) -> ForwardResult:
        return self.forward(x, TRAIN_NOISE, rng)

    def forward_test(self, x: Tensor) -> ForwardResult:
        with no_grad():
            return self.forward(x, TEST_ROUND)

    def digest(self) -> str:
        """Hash of the architecture and every parameter value."""
        h = hashlib.sha256(self.cfg.to_json().encode())
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def _pe_widths(c: int) -> list[int]:
    return [4 * c, int(round(10 * c / 3)), int(round(8 * c / 3)), 2 * c]


def rounded_latents(y: MFTensor) -> MFTensor:
    return MFTensor(Tensor(round_half_away(y.hf.data)), Tensor(round_half_away(y.lf.data)))


# -- FLOPs ----------------------------------------------------------------------
def count_flops(model_or_cfg: CodecModel | ArchConfig, height: int, width: int, batch: int = 1) -> dict:
    """FLOPs (2 x multiply-accumulates) of every convolution-like layer, by dry run.

    Covers the core encoder and decoder, hyper encoder and decoder, both
    context models and both parameter estimators.  GDN contributes c^2 MACs
    per pixel through its 1x1 normalisation convolution.  Resampling,
    additions and pointwise activations are not counted.
    """
    model = model_or_cfg if isinstance(model_or_cfg, CodecModel) else CodecModel(model_or_cfg)
    if height <= 0 or width <= 0 or height % IMAGE_MULTIPLE or width % IMAGE_MULTIPLE:
        raise ValueError(f"dims {height}x{width} must be positive multiples of {IMAGE_MULTIPLE}")
    x = Tensor(np.zeros((batch, 3, height, width), dtype=np.float32))
    with no_grad(), flops.counting(dry_run=True) as counter:
        y = model.encode_analysis(x)
        model.decode_synthesis(y)
        psi = model.hyper_synthesis(model.hyper_analysis(y))
        for band, yb, pb in (("h", y.hf, psi.hf), ("l", y.lf, psi.lf)):
            model.estimate_params(pb, model.context_predict(yb, band), band)
    per_module = {k: 2 * v for k, v in counter.by_scope().items()}
    per_category = {k: 2 * v for k, v in counter.by_category().items()}
    return {"total": 2 * counter.total(), "per_module": per_module, "per_category": per_category}


# -- checkpoints ----------------------------------------------------------------
def save_checkpoint(path: str | Path, model: CodecModel, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write the little-endian checkpoint: header, JSON metadata, named float32 blocks."""
    info = {"arch": json.loads(model.cfg.to_json()), "seed": model.seed}
    if meta:
        info.update(meta)
    blob = json.dumps(info, sort_keys=True).encode()
    blocks = [(name, p.data) for name, p in model.named_parameters()]
    blocks += sorted((extra or {}).items())
    out = bytearray(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(blob)) + blob)
    out += struct.pack("<I", len(blocks))
    for name, arr in blocks:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[CodecModel, dict, dict[str, np.ndarray]]:
    """Inverse of :func:`save_checkpoint`; returns (model, metadata, non-parameter blocks)."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, nmeta = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    info = json.loads(data[pos : pos + nmeta])
    pos += nmeta
    (nblocks,) = struct.unpack_from("<I", data, pos)
    pos += 4
    blocks = {}
    for _ in range(nblocks):
        (nlen,) = struct.unpack_from("<H", data, pos)
        name = data[pos + 2 : pos + 2 + nlen].decode()
        pos += 2 + nlen
        rank = data[pos]
        shape = struct.unpack_from(f"<{rank}I", data, pos + 1)
        pos += 1 + 4 * rank
        count = int(np.prod(shape)) if rank else 1
        blocks[name] = np.frombuffer(data, "<f4", count, pos).reshape(shape).astype(np.float32)
        pos += 4 * count
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    model = CodecModel(ArchConfig.from_dict(info["arch"]), seed=info.get("seed", 0))
    for name, p in model.named_parameters():
        if name not in blocks:
            raise ValueError(f"{path}: missing parameter {name}")
        if blocks[name].shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {blocks[name].shape}, expected {p.shape}")
        p.data = blocks.pop(name).copy()
    return model, info, blocks
