"""8-bit RGB image files: binary PPM (P6) natively, PNG through Pillow."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SUFFIXES = (".ppm", ".png")


class ImageError(ValueError):
    pass


@dataclass
class ImageFile:
    pixels: np.ndarray  # (h, w, 3) uint8
    path: Path | None = None

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def to_float(self) -> np.ndarray:
        """(3, h, w) float32 on [0, 1], exactly value / 255."""
        return (self.pixels.astype(np.float32) / np.float32(255)).transpose(2, 0, 1).copy()

    @classmethod
    def from_float(cls, image: np.ndarray) -> "ImageFile":
        """Round a (3, h, w) [0, 1] array to 8 bits."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] != 3:
            raise ImageError(f"expected a 3 x h x w image, got {image.shape}")
        q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        return cls(q.transpose(1, 2, 0).copy())


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_ppm(data: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise ImageError("not a binary PPM (P6) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageError(f"only 8-bit PPM is supported (maxval {maxval})")
    if w <= 0 or h <= 0:
        raise ImageError(f"invalid PPM dimensions {w}x{h}")
    body = data[m.end() :]
    if len(body) < w * h * 3:
        raise ImageError(f"PPM pixel data truncated: {len(body)} of {w * h * 3} bytes")
    return np.frombuffer(body, np.uint8, w * h * 3).reshape(h, w, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, np.uint8).tobytes()


def read_image(path: str | Path) -> ImageFile:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageError(f"{path}: {e.strerror}") from None
    if data[:2] == b"P6":
        return ImageFile(decode_ppm(data), path)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from io import BytesIO

        from PIL import Image

        try:
            with Image.open(BytesIO(data)) as im:
                rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except (OSError, ValueError) as e:
            raise ImageError(f"{path}: unreadable PNG ({e})") from None
        return ImageFile(rgb.copy(), path)
    raise ImageError(f"{path}: unsupported image format (expected binary PPM or PNG)")


def write_image(path: str | Path, image: ImageFile | np.ndarray) -> None:
    """Write PPM or PNG according to the suffix; float arrays are rounded to 8 bits first."""
    path = Path(path)
    if not isinstance(image, ImageFile):
        image = ImageFile.from_float(image)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        path.write_bytes(encode_ppm(image.pixels))
    elif suffix == ".png":
        from PIL import Image

        Image.fromarray(image.pixels, "RGB").save(path, format="PNG")
    else:
        raise ImageError(f"{path}: output must end in .ppm or .png")


def list_images(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageError(f"{directory}: not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in SUFFIXES and p.is_file())
