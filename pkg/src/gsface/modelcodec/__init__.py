"""Compact avatar compression: latents, quantization + Huffman, pruning, LZ77."""

from .container import (
    CompactModel,
    CompressionConfig,
    PackReport,
    compress_avatar,
    pack_container,
    read_container,
    unpack_container,
)

__all__ = [
    "CompactModel",
    "CompressionConfig",
    "PackReport",
    "compress_avatar",
    "pack_container",
    "read_container",
    "unpack_container",
]
