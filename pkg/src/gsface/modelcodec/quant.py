"""Per-channel uniform quantization of point attributes with Huffman-coded payloads."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..bits import BitstreamError
from ..paramcodec import dequantize, quantize
from . import huffman

MIN_BITS = 2
MAX_BITS = 16
_HEAD = struct.Struct("<IH")
_CHAN = struct.Struct("<ffB")
_PAYLOAD = struct.Struct("<I")


@dataclass
class QuantizedAttr:
    """N x c integers with per-channel range, bit depth and Huffman table.

    A channel with ``bits == 0`` is constant (``lo == hi``) and carries no payload.
    """

    q: np.ndarray        # N x c int64
    lo: np.ndarray       # c, float32-representable
    hi: np.ndarray
    bits: np.ndarray     # c, 0 for constant channels
    tables: list         # HuffmanTable or None per channel

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def step(self) -> np.ndarray:
        levels = np.where(self.bits > 0, (1 << self.bits.astype(np.int64)) - 1, 1)
        return np.where(self.bits > 0, (self.hi - self.lo) / levels, 0.0)


def _f32_floor(x: float) -> float:
    y = np.float32(x)
    return float(np.nextafter(y, np.float32(-np.inf)) if y > x else y)


def _f32_ceil(x: float) -> float:
    y = np.float32(x)
    return float(np.nextafter(y, np.float32(np.inf)) if y < x else y)


def quantize_attr(values: np.ndarray, bits) -> QuantizedAttr:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n, c = values.shape
    if n == 0:
        raise ValueError("cannot quantize an empty attribute")
    if not np.all(np.isfinite(values)):
        raise ValueError("attribute contains non-finite values")
    bits = np.broadcast_to(np.asarray(bits, dtype=np.int64), (c,)).copy()
    if np.any(bits < MIN_BITS) or np.any(bits > MAX_BITS):
        raise ValueError(f"bit depth must lie in [{MIN_BITS}, {MAX_BITS}]")
    q = np.zeros((n, c), dtype=np.int64)
    lo = np.zeros(c)
    hi = np.zeros(c)
    tables = []
    for j in range(c):
        col = values[:, j]
        if col.min() == col.max():
            lo[j] = hi[j] = float(np.float32(col[0]))
            bits[j] = 0
            tables.append(None)
            continue
        # range endpoints are stored as float32; widen outward so they still bracket the data
        lo[j] = _f32_floor(col.min())
        hi[j] = _f32_ceil(col.max())
        q[:, j] = quantize(col, lo[j], hi[j], int(bits[j]))
        tables.append(huffman.table_for(q[:, j]))
    return QuantizedAttr(q, lo, hi, bits, tables)


def dequantize_attr(attr: QuantizedAttr) -> np.ndarray:
    out = np.empty(attr.q.shape, dtype=np.float64)
    for j in range(attr.q.shape[1]):
        if attr.bits[j] == 0:
            out[:, j] = attr.lo[j]
        else:
            out[:, j] = dequantize(attr.q[:, j], attr.lo[j], attr.hi[j], int(attr.bits[j]))
    return out


def attr_to_bytes(attr: QuantizedAttr) -> bytes:
    n, c = attr.q.shape
    parts = [_HEAD.pack(n, c)]
    for j in range(c):
        parts.append(_CHAN.pack(attr.lo[j], attr.hi[j], int(attr.bits[j])))
        if attr.bits[j] == 0:
            continue
        table = attr.tables[j]
        payload, nbits = huffman.encode(attr.q[:, j], table)
        parts += [table.to_bytes(), _PAYLOAD.pack(nbits), payload]
    return b"".join(parts)


def attr_from_bytes(blob: bytes) -> QuantizedAttr:
    blob = bytes(blob)
    try:
        n, c = _HEAD.unpack_from(blob, 0)
    except struct.error:
        raise BitstreamError("quantized attribute truncated in header", 0) from None
    off = _HEAD.size
    q = np.zeros((n, c), dtype=np.int64)
    lo = np.zeros(c)
    hi = np.zeros(c)
    bits = np.zeros(c, dtype=np.int64)
    tables = []
    for j in range(c):
        try:
            lo[j], hi[j], bits[j] = _CHAN.unpack_from(blob, off)
        except struct.error:
            raise BitstreamError(f"channel {j} header truncated", 8 * off) from None
        off += _CHAN.size
        if bits[j] == 0:
            if lo[j] != hi[j]:
                raise BitstreamError(f"constant channel {j} has lo != hi", 8 * off)
            tables.append(None)
            continue
        if not MIN_BITS <= bits[j] <= MAX_BITS or hi[j] <= lo[j]:
            raise BitstreamError(f"channel {j} has invalid range or bit depth", 8 * off)
        table, off = huffman.HuffmanTable.from_bytes(blob, off)
        if table.symbols.max() >> int(bits[j]):
            raise BitstreamError(f"channel {j} table holds symbols beyond {bits[j]} bits", 8 * off)
        (nbits,) = _PAYLOAD.unpack_from(blob, off)
        off += _PAYLOAD.size
        nbytes = (nbits + 7) // 8
        if off + nbytes > len(blob):
            raise BitstreamError(f"channel {j} payload truncated", 8 * len(blob))
        q[:, j] = huffman.decode(blob[off:off + nbytes], nbits, n, table)
        off += nbytes
        tables.append(table)
    if off != len(blob):
        raise BitstreamError("trailing bytes after quantized attribute", 8 * off)
    return QuantizedAttr(q, lo, hi, bits, tables)
