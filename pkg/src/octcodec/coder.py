"""Range coding of quantized latents and the four-stream bitstream container.

The coder is a 64-bit carry-less (Subbotin) range coder over 16-bit
cumulative frequency tables.  Values outside a table's [-B, B] alphabet go
through an escape bin followed by an order-0 Exp-Golomb code of the excess,
one equiprobable binary decision per bit.
"""

from __future__ import annotations

import bisect
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .entropy import SIGMA_MIN, gaussian_pmf
from .network import IMAGE_MULTIPLE, CodecModel
from .octave import MFTensor
from .tensor import Tensor, no_grad

PRECISION = 16
TOTAL = 1 << PRECISION
Y_BOUND = 64
Z_BOUND = 30

_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48
_FLUSH_BYTES = 2
_HALF = TOTAL >> 1

STREAM_MAGIC = b"OCMF"
STREAM_VERSION = 1
STREAMS = ("z_h", "z_l", "y_h", "y_l")


class StreamError(ValueError):
    """Malformed, truncated or mismatched bitstream."""


class DigestMismatch(StreamError):
    def __init__(self, stream_digest: str, model_digest: str):
        super().__init__(f"bitstream was produced by model {stream_digest}, but the loaded model is {model_digest}")
        self.stream_digest = stream_digest
        self.model_digest = model_digest


# -- CDF tables -----------------------------------------------------------------
def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer counts summing to 2^precision along the last axis, every count >= 1.

    Largest-remainder rounding of pmf * 2^precision (ties to the lower index),
    then each empty bin is raised to 1 count taken from the row's largest bin.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape[-1] == 0:
        raise ValueError("empty alphabet")
    if np.any(pmf < 0) or np.any(pmf.sum(axis=-1) > 1 + 1e-6):
        raise ValueError("pmf must be non-negative and sum to at most 1")
    total = 1 << precision
    size = pmf.shape[-1]
    if size > total // 2:
        raise ValueError(f"alphabet of {size} symbols is too large for {precision}-bit tables")
    rows = pmf.reshape(-1, size)
    sums = rows.sum(axis=1, keepdims=True)
    rows = np.where(sums > 0, rows / np.where(sums > 0, sums, 1.0), 1.0 / size)
    scaled = rows * total
    counts = np.floor(scaled).astype(np.int64)
    short = total - counts.sum(axis=1)
    order = np.argsort(-(scaled - counts), axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(size)[None, :].repeat(len(rows), 0), axis=1)
    counts += rank < short[:, None]
    empty = counts == 0
    n_empty = empty.sum(axis=1)
    counts[empty] = 1
    top = np.argmax(counts, axis=1)
    counts[np.arange(len(rows)), top] -= n_empty
    if np.any(counts < 1):
        raise ValueError("pmf cannot be represented: too many empty bins")
    return counts.reshape(pmf.shape)


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts over [low escape, -B..B, high escape]."""

    cum: tuple[int, ...]
    bound: int

    def __post_init__(self):
        if len(self.cum) != 2 * self.bound + 4 or self.cum[0] != 0 or self.cum[-1] != TOTAL:
            raise ValueError("malformed CDF table")

    @property
    def size(self) -> int:
        return len(self.cum) - 1

    def index(self, value: int) -> int:
        if value < -self.bound:
            return 0
        if value > self.bound:
            return self.size - 1
        return value + self.bound + 1

    def freq(self, idx: int) -> int:
        return self.cum[idx + 1] - self.cum[idx]


def build_cdf(pmf: np.ndarray, precision: int = PRECISION) -> CdfTable:
    """One table from a pmf over [low escape, -B..B, high escape] (odd length + 2)."""
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1:
        raise ValueError("build_cdf expects a single pmf vector")
    if len(pmf) < 3 or len(pmf) % 2 == 0:
        raise ValueError(f"pmf length {len(pmf)} is not 2B+3")
    if precision != PRECISION:
        raise ValueError(f"only {PRECISION}-bit tables are supported")
    counts = quantize_pmf(pmf, precision)
    return CdfTable(tuple(int(v) for v in np.concatenate([[0], np.cumsum(counts)])), (len(pmf) - 3) // 2)


def build_cdfs(pmfs: np.ndarray) -> list[CdfTable]:
    """Vectorized :func:`build_cdf` over the leading axis."""
    counts = quantize_pmf(pmfs)
    cum = np.concatenate([np.zeros((len(counts), 1), np.int64), np.cumsum(counts, axis=1)], axis=1)
    bound = (pmfs.shape[-1] - 3) // 2
    return [CdfTable(tuple(row), bound) for row in cum.tolist()]


def with_escapes(pmf: np.ndarray) -> np.ndarray:
    """Append zero-mass escape bins to a pmf over -B..B."""
    pad = [(0, 0)] * (pmf.ndim - 1) + [(1, 1)]
    return np.pad(pmf, pad)


# -- range coder ----------------------------------------------------------------
class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum_lo: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    break
                self.range = -self.low & (_BOT - 1)
            self.out.append(self.low >> 56)
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK

    def encode_bit(self, bit: int) -> None:
        self.encode(_HALF if bit else 0, _HALF)

    def encode_symbol(self, value: int, table: CdfTable) -> None:
        idx = table.index(value)
        self.encode(table.cum[idx], table.freq(idx))
        if idx == 0:
            self._exp_golomb(-table.bound - 1 - value)
        elif idx == table.size - 1:
            self._exp_golomb(value - table.bound - 1)

    def _exp_golomb(self, excess: int) -> None:
        n = excess + 1
        width = n.bit_length()
        for _ in range(width - 1):
            self.encode_bit(0)
        for i in range(width - 1, -1, -1):
            self.encode_bit((n >> i) & 1)

    def finish(self) -> bytes:
        # any value in [low, low + range) identifies the stream; pick one whose
        # low 48 bits are zero so only two bytes need to be written
        v = (self.low + _BOT - 1) & ~(_BOT - 1)
        for _ in range(_FLUSH_BYTES):
            self.out.append(v >> 56)
            v = (v << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        if pos >= len(self.data) + 8 - _FLUSH_BYTES:
            raise StreamError("range-coded payload is truncated")
        return 0

    def decode(self, cum: Sequence[int]) -> int:
        r = self.range >> PRECISION
        target = (self.code - self.low) // r
        if target >= TOTAL:
            raise StreamError("range-coded payload is corrupt")
        idx = bisect.bisect_right(cum, target) - 1
        self.low += r * cum[idx]
        self.range = r * (cum[idx + 1] - cum[idx])
        while True:
            if (self.low ^ (self.low + self.range)) >= _TOP:
                if self.range >= _BOT:
                    break
                self.range = -self.low & (_BOT - 1)
            self.code = ((self.code << 8) | self._byte()) & _MASK
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK
        return idx

    def decode_bit(self) -> int:
        return self.decode((0, _HALF, TOTAL))

    def decode_symbol(self, table: CdfTable) -> int:
        idx = self.decode(table.cum)
        if idx == 0:
            return -table.bound - 1 - self._exp_golomb()
        if idx == table.size - 1:
            return table.bound + 1 + self._exp_golomb()
        return idx - table.bound - 1

    def _exp_golomb(self) -> int:
        zeros = 0
        while self.decode_bit() == 0:
            zeros += 1
            if zeros > 64:
                raise StreamError("runaway escape code")
        n = 1
        for _ in range(zeros):
            n = (n << 1) | self.decode_bit()
        return n - 1

    def finish(self) -> None:
        """Check that exactly the whole payload was consumed."""
        if self.pos != len(self.data) + 8 - _FLUSH_BYTES:
            raise StreamError(f"payload length mismatch: {len(self.data)} bytes present, "
                              f"{self.pos - 8 + _FLUSH_BYTES} consumed")
        # the code register must now hold exactly the value the encoder flushed
        if self.code != (self.low + _BOT - 1) & ~(_BOT - 1):
            raise StreamError("range-coded payload is truncated or corrupt")


def rc_encode(symbols: Sequence[int], cdfs: Sequence[CdfTable]) -> bytes:
    if len(symbols) != len(cdfs):
        raise ValueError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for v, table in zip(symbols, cdfs):
        enc.encode_symbol(int(v), table)
    return enc.finish()


def rc_decode(data: bytes, cdfs: Sequence[CdfTable]) -> list[int]:
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(t) for t in cdfs]
    dec.finish()
    return out


def ideal_bits(symbols: Sequence[int], cdfs: Sequence[CdfTable]) -> float:
    """Information content under the quantized tables, escape bits included."""
    bits = 0.0
    for v, table in zip(symbols, cdfs):
        idx = table.index(int(v))
        bits += PRECISION - np.log2(table.freq(idx))
        if idx == 0:
            bits += 2 * (-table.bound - v).bit_length() - 1
        elif idx == table.size - 1:
            bits += 2 * (v - table.bound).bit_length() - 1
    return bits


# -- bitstream container ----------------------------------------------------------
_HEADER = struct.Struct("<4sBIIII8sH")


@dataclass
class Bitstream:
    width: int
    height: int
    pad_width: int
    pad_height: int
    model_digest: str
    lambda_id: int = 0
    payloads: dict[str, bytes] = field(default_factory=lambda: {k: b"" for k in STREAMS})

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, self.width, self.height, self.pad_width,
                                     self.pad_height, bytes.fromhex(self.model_digest), self.lambda_id))
        for key in STREAMS:
            out += struct.pack("<I", len(self.payloads[key])) + self.payloads[key]
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise StreamError("bitstream shorter than its header")
        magic, version, w, h, pw, ph, digest, lam = _HEADER.unpack_from(data, 0)
        if magic != STREAM_MAGIC:
            raise StreamError("not an octave-codec bitstream (bad magic)")
        if version != STREAM_VERSION:
            raise StreamError(f"unsupported bitstream version {version}")
        pos = _HEADER.size
        payloads = {}
        for key in STREAMS:
            if pos + 4 > len(data):
                raise StreamError(f"bitstream truncated before the {key} payload")
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + n > len(data):
                raise StreamError(f"{key} payload truncated: {len(data) - pos} of {n} bytes")
            payloads[key] = bytes(data[pos : pos + n])
            pos += n
        if pos != len(data):
            raise StreamError(f"{len(data) - pos} trailing bytes after the last payload")
        return cls(w, h, pw, ph, digest.hex(), lam, payloads)

    @property
    def num_bytes(self) -> int:
        return _HEADER.size + sum(4 + len(p) for p in self.payloads.values())

    @property
    def bpp(self) -> float:
        return 8.0 * self.num_bytes / (self.width * self.height)

    def payload_bits(self, keys: Sequence[str] = STREAMS) -> int:
        return 8 * sum(len(self.payloads[k]) for k in keys)

    def band_bits(self) -> tuple[int, int]:
        """Whole-file bits split by frequency band; the two parts always sum to the file size.

        Each payload and its length prefix belong to their band; the shared
        header is split evenly.
        """
        hf = 8 * sum(4 + len(self.payloads[k]) for k in ("z_h", "y_h")) + 8 * _HEADER.size // 2
        return hf, 8 * self.num_bytes - hf


# -- image coding ---------------------------------------------------------------
def pad_image(x: np.ndarray, multiple: int = IMAGE_MULTIPLE) -> np.ndarray:
    """Edge-replicate a (3, h, w) image up to the next multiple of ``multiple``."""
    _, h, w = x.shape
    ph, pw = -h % multiple, -w % multiple
    return np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge")


class _BandContext:
    """Per-position Gaussian parameters for one band, computed identically by encoder and decoder."""

    def __init__(self, model: CodecModel, band: str, psi: np.ndarray, channels: int, check_access: bool = False):
        cm = model.cm_h if band == "h" else model.cm_l
        pe = model.pe_h if band == "h" else model.pe_l
        self.k = cm.weight.shape[-1]
        self.pad = self.k // 2
        self.weight = (cm.weight.data * cm.mask).astype(np.float32)
        self.mask = cm.mask[0, 0].astype(bool)
        self.bias = cm.bias.data.astype(np.float32)
        self.pe = [(l.weight.data[:, :, 0, 0].astype(np.float32), l.bias.data.astype(np.float32)) for l in pe.layers]
        self.slope = np.float32(pe.slope)
        self.psi = psi.astype(np.float32)
        self.channels = channels
        _, h, w = psi.shape
        self.shape = (h, w)
        self.buf = np.zeros((channels, h + 2 * self.pad, w + 2 * self.pad), np.float32)
        self.defined = np.zeros((h + 2 * self.pad, w + 2 * self.pad), bool)
        self.check_access = check_access

    def params(self, r: int, c: int) -> tuple[np.ndarray, np.ndarray]:
        win = self.buf[:, r : r + self.k, c : c + self.k]
        if self.check_access:
            inside = np.zeros_like(self.defined)
            inside[self.pad : -self.pad, self.pad : -self.pad] = True
            needed = self.mask & inside[r : r + self.k, c : c + self.k]
            if not self.defined[r : r + self.k, c : c + self.k][needed].all():
                raise AssertionError(f"context at ({r}, {c}) reads a position that is not decoded yet")
        phi = np.tensordot(self.weight, win, axes=([1, 2, 3], [0, 1, 2])) + self.bias
        h = np.concatenate([self.psi[:, r, c], phi])
        for i, (wt, b) in enumerate(self.pe):
            h = wt @ h + b
            if i < len(self.pe) - 1:
                h = np.where(h > 0, h, self.slope * h)
        mu = h[: self.channels]
        sigma = np.exp(h[self.channels :]) + np.float32(SIGMA_MIN)
        return mu, sigma

    def set(self, r: int, c: int, values: np.ndarray) -> None:
        self.buf[:, r + self.pad, c + self.pad] = values
        self.defined[r + self.pad, c + self.pad] = True


def _code_band(model: CodecModel, band: str, psi: np.ndarray, channels: int, coder,
               values: np.ndarray | None = None, check_access: bool = False) -> np.ndarray:
    """Raster-order autoregressive pass; encodes ``values`` or decodes when ``values`` is None."""
    ctx = _BandContext(model, band, psi, channels, check_access)
    h, w = ctx.shape
    out = np.zeros((channels, h, w), np.float32)
    for r in range(h):
        for c in range(w):
            mu, sigma = ctx.params(r, c)
            tables = build_cdfs(gaussian_pmf(mu, sigma, Y_BOUND))
            if values is None:
                sym = np.array([coder.decode_symbol(t) for t in tables], np.float32)
            else:
                sym = values[:, r, c]
                for v, t in zip(sym.astype(np.int64).tolist(), tables):
                    coder.encode_symbol(v, t)
            out[:, r, c] = sym
            ctx.set(r, c, sym)
    return out


def _prior_tables(prior) -> list[CdfTable]:
    return build_cdfs(with_escapes(prior.pmf_table()))


def _code_z(tables: list[CdfTable], coder, shape, values: np.ndarray | None = None) -> np.ndarray:
    c, h, w = shape
    out = np.zeros(shape, np.float32)
    for ch in range(c):
        t = tables[ch]
        for r in range(h):
            for col in range(w):
                if values is None:
                    out[ch, r, col] = coder.decode_symbol(t)
                else:
                    coder.encode_symbol(int(values[ch, r, col]), t)
                    out[ch, r, col] = values[ch, r, col]
    return out


@dataclass
class EncodeResult:
    bitstream: Bitstream
    reconstruction: np.ndarray  # (3, h, w) in [0, 1], cropped
    estimated_bits: dict[str, float]

    @property
    def estimated_total(self) -> float:
        return float(sum(self.estimated_bits.values()))


def _as_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise ValueError("encode one image at a time")
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3 x h x w image, got {image.shape}")
    return image


def _finish_image(x_tilde: Tensor, h: int, w: int) -> np.ndarray:
    return np.clip(x_tilde.data[0, :, :h, :w], 0.0, 1.0)


def encode_image(image: np.ndarray, model: CodecModel, lambda_id: int = 0,
                 check_access: bool = False) -> EncodeResult:
    """Compress a (3, h, w) image in [0, 1]; returns the stream and the encoder-side reconstruction."""
    x = _as_chw(image)
    _, h, w = x.shape
    xp = pad_image(x)
    with no_grad():
        out = model.forward_test(Tensor(xp[None]))
    y_hat = out.y_hat
    z_hat = out.z_hat
    estimated = {k: float(-np.log2(p.data.astype(np.float64)).sum()) for k, p in out.likelihoods.items()}
    with no_grad():
        psi = model.hyper_synthesis(MFTensor(Tensor(z_hat.hf.data), Tensor(z_hat.lf.data)))
    bs = Bitstream(w, h, xp.shape[2], xp.shape[1], model.digest(), lambda_id)
    for key, zb, prior in (("z_h", z_hat.hf, model.prior_h), ("z_l", z_hat.lf, model.prior_l)):
        enc = RangeEncoder()
        _code_z(_prior_tables(prior), enc, zb.shape[1:], zb.data[0])
        bs.payloads[key] = enc.finish()
    for key, band, yb, pb in (("y_h", "h", y_hat.hf, psi.hf), ("y_l", "l", y_hat.lf, psi.lf)):
        enc = RangeEncoder()
        _code_band(model, band, pb.data[0], yb.shape[1], enc, yb.data[0], check_access)
        bs.payloads[key] = enc.finish()
    with no_grad():
        x_rec = model.decode_synthesis(MFTensor(Tensor(y_hat.hf.data), Tensor(y_hat.lf.data)))
    return EncodeResult(bs, _finish_image(x_rec, h, w), estimated)


def decode_image(bs: Bitstream | bytes, model: CodecModel, parallel: bool = False,
                 check_access: bool = False) -> np.ndarray:
    """Reconstruct the (3, h, w) image in [0, 1] from a bitstream."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bs)
    digest = model.digest()
    if bs.model_digest != digest:
        raise DigestMismatch(bs.model_digest, digest)
    if bs.pad_height % IMAGE_MULTIPLE or bs.pad_width % IMAGE_MULTIPLE:
        raise StreamError(f"padded size {bs.pad_width}x{bs.pad_height} is not a multiple of {IMAGE_MULTIPLE}")
    zh_ch, zl_ch = model.prior_h.channels, model.prior_l.channels
    zh_shape = (zh_ch, bs.pad_height // 64, bs.pad_width // 64)
    zl_shape = (zl_ch, bs.pad_height // 128, bs.pad_width // 128)
    z = {}
    for key, shape, prior in (("z_h", zh_shape, model.prior_h), ("z_l", zl_shape, model.prior_l)):
        dec = RangeDecoder(bs.payloads[key])
        z[key] = _code_z(_prior_tables(prior), dec, shape)
        dec.finish()
    with no_grad():
        psi = model.hyper_synthesis(MFTensor(Tensor(z["z_h"][None]), Tensor(z["z_l"][None])))
    mh, ml = model.cfg.latent_split

    def run(key, band, pb, channels):
        dec = RangeDecoder(bs.payloads[key])
        y = _code_band(model, band, pb.data[0], channels, dec, None, check_access)
        dec.finish()
        return y

    jobs = (("y_h", "h", psi.hf, mh), ("y_l", "l", psi.lf, ml))
    if parallel:
        with ThreadPoolExecutor(max_workers=2) as pool:
            y_h, y_l = pool.map(lambda j: run(*j), jobs)
    else:
        y_h, y_l = (run(*j) for j in jobs)
    with no_grad():
        x_rec = model.decode_synthesis(MFTensor(Tensor(y_h[None]), Tensor(y_l[None])))
    return _finish_image(x_rec, bs.height, bs.width)
