"""Learned multi-frequency image compression with generalized octave convolutions."""

__version__ = "0.1.0"

from .coder import Bitstream, decode_image, encode_image  # noqa: E402
from .network import ArchConfig, CodecModel, count_flops, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = ["ArchConfig", "Bitstream", "CodecModel", "count_flops", "decode_image", "encode_image",
           "load_checkpoint", "save_checkpoint"]
