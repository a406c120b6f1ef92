"""Canonical Huffman coding over small integer alphabets."""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass

import numpy as np

from ..bits import BitstreamError, pack_fields, read_fields, unpack_bits

# direct lookup tables are used up to this code length
MAX_TABLE_BITS = 20


@dataclass(frozen=True)
class HuffmanTable:
    """Code lengths for the used symbols, in canonical (length, symbol) order."""

    symbols: np.ndarray  # int64, canonical order
    lengths: np.ndarray  # int64, same order, non-decreasing

    def __post_init__(self):
        if self.symbols.size == 0:
            raise ValueError("Huffman table needs at least one symbol")
        if np.any(np.diff(self.lengths) < 0) or self.lengths.min() < 1:
            raise ValueError("code lengths must be positive and sorted")

    @property
    def max_length(self) -> int:
        return int(self.lengths[-1])

    def kraft_sum(self) -> float:
        return float(np.sum(np.ldexp(1.0, -self.lengths.astype(np.int32))))

    def codes(self) -> np.ndarray:
        """Canonical codewords, aligned with ``symbols``."""
        codes = np.empty(self.symbols.size, dtype=np.int64)
        code = 0
        prev = int(self.lengths[0])
        for i, length in enumerate(self.lengths.tolist()):
            code <<= length - prev
            codes[i] = code
            code += 1
            prev = length
        return codes

    def length_of(self) -> dict[int, int]:
        return dict(zip(self.symbols.tolist(), self.lengths.tolist()))

    def to_bytes(self) -> bytes:
        """max_len:u8, count per length 1..max_len as u32, symbols as u32."""
        counts = np.bincount(self.lengths, minlength=self.max_length + 1)[1:]
        return (
            struct.pack("<B", self.max_length)
            + counts.astype("<u4").tobytes()
            + self.symbols.astype("<u4").tobytes()
        )

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["HuffmanTable", int]:
        try:
            (max_len,) = struct.unpack_from("<B", data, offset)
            counts = np.frombuffer(data, "<u4", max_len, offset + 1).astype(np.int64)
            n = int(counts.sum())
            symbols = np.frombuffer(data, "<u4", n, offset + 1 + 4 * max_len).astype(np.int64)
        except (struct.error, ValueError) as exc:
            raise BitstreamError(f"truncated Huffman table: {exc}") from None
        lengths = np.repeat(np.arange(1, max_len + 1), counts)
        table = cls(symbols, lengths)
        kraft = table.kraft_sum()
        if kraft > 1.0 or (n > 1 and kraft != 1.0):
            raise BitstreamError("Huffman table violates the Kraft equality")
        return table, offset + 1 + 4 * max_len + 4 * n


def code_lengths(frequencies: dict[int, int] | np.ndarray) -> dict[int, int]:
    """Huffman code length per symbol with nonzero frequency.

    Ties are broken deterministically: equal weights merge in order of
    creation, leaves (by symbol) before internal nodes.
    """
    if isinstance(frequencies, dict):
        items = [(int(s), int(f)) for s, f in frequencies.items() if f > 0]
    else:
        freq = np.asarray(frequencies)
        items = [(int(s), int(freq[s])) for s in np.flatnonzero(freq)]
    if not items:
        raise ValueError("need at least one symbol with nonzero frequency")
    items.sort()
    if len(items) == 1:
        return {items[0][0]: 1}
    # heap entries: (weight, tiebreak, symbols under this node)
    heap = [(f, i, [s]) for i, (s, f) in enumerate(items)]
    heapq.heapify(heap)
    depth = {s: 0 for s, _ in items}
    serial = len(heap)
    while len(heap) > 1:
        f1, _, a = heapq.heappop(heap)
        f2, _, b = heapq.heappop(heap)
        merged = a + b
        for s in merged:
            depth[s] += 1
        heapq.heappush(heap, (f1 + f2, serial, merged))
        serial += 1
    return depth


def build_table(frequencies: dict[int, int] | np.ndarray) -> HuffmanTable:
    lengths = code_lengths(frequencies)
    order = sorted(lengths.items(), key=lambda kv: (kv[1], kv[0]))
    return HuffmanTable(
        np.array([s for s, _ in order], dtype=np.int64),
        np.array([n for _, n in order], dtype=np.int64),
    )


def table_for(symbols: np.ndarray) -> HuffmanTable:
    symbols = np.asarray(symbols, dtype=np.int64)
    values, counts = np.unique(symbols, return_counts=True)
    return build_table(dict(zip(values.tolist(), counts.tolist())))


def encode(symbols: np.ndarray, table: HuffmanTable) -> tuple[bytes, int]:
    """Returns (packed bytes, exact bit count)."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    if symbols.size == 0:
        return b"", 0
    order = np.argsort(table.symbols, kind="stable")
    pos = np.searchsorted(table.symbols, symbols, sorter=order)
    pos = np.clip(pos, 0, table.symbols.size - 1)
    idx = order[pos]
    if np.any(table.symbols[idx] != symbols):
        bad = symbols[table.symbols[idx] != symbols][0]
        raise ValueError(f"symbol {int(bad)} has no code in the table")
    return pack_fields(table.codes()[idx], table.lengths[idx])


def decode(data: bytes, nbits: int, count: int, table: HuffmanTable) -> np.ndarray:
    """Decode ``count`` symbols from the first ``nbits`` bits of ``data``."""
    if count == 0:
        if nbits:
            raise BitstreamError("stray bits after last symbol", 0)
        return np.zeros(0, dtype=np.int64)
    bits = unpack_bits(data)
    if nbits > bits.size:
        raise BitstreamError("payload shorter than declared bit count", bits.size)
    bits = bits[:nbits]
    max_len = table.max_length
    if max_len > MAX_TABLE_BITS:
        return decode_reference(data, nbits, count, table)
    # every codeword read as a max_len window (zero-extended past the end)
    padded = np.concatenate([bits, np.zeros(max_len, dtype=np.uint8)])
    windows = read_fields(padded, np.arange(nbits), max_len).tolist()
    sym_lut = np.full(1 << max_len, -1, dtype=np.int64)
    len_lut = np.zeros(1 << max_len, dtype=np.int64)
    for code, length, sym in zip(table.codes().tolist(), table.lengths.tolist(), table.symbols.tolist()):
        lo = code << (max_len - length)
        hi = (code + 1) << (max_len - length)
        sym_lut[lo:hi] = sym
        len_lut[lo:hi] = length
    sym_l = sym_lut.tolist()
    len_l = len_lut.tolist()
    out = [0] * count
    pos = 0
    for i in range(count):
        if pos >= nbits:
            raise BitstreamError(f"stream ended after {i} of {count} symbols", pos)
        w = windows[pos]
        step = len_l[w]
        if step == 0:
            raise BitstreamError("invalid Huffman codeword", pos)
        out[i] = sym_l[w]
        pos += step
    if pos != nbits:
        kind = "stream ended inside a codeword" if pos > nbits else "stray bits after last symbol"
        raise BitstreamError(kind, min(pos, nbits))
    return np.array(out, dtype=np.int64)


def decode_reference(data: bytes, nbits: int, count: int, table: HuffmanTable) -> np.ndarray:
    """Bit-at-a-time canonical decoder (no lookup tables)."""
    bits = unpack_bits(data)[:nbits].tolist()
    if len(bits) < nbits:
        raise BitstreamError("payload shorter than declared bit count", len(bits))
    codes = table.codes().tolist()
    lengths = table.lengths.tolist()
    # first code and first index per length
    first_code: dict[int, int] = {}
    first_index: dict[int, int] = {}
    n_of: dict[int, int] = {}
    for i, (c, n) in enumerate(zip(codes, lengths)):
        if n not in first_code:
            first_code[n], first_index[n] = c, i
        n_of[n] = n_of.get(n, 0) + 1
    syms = table.symbols.tolist()
    out = []
    pos = 0
    for _ in range(count):
        code = 0
        start = pos
        for length in range(1, table.max_length + 1):
            if pos >= nbits:
                raise BitstreamError("stream ended inside a codeword", start)
            code = (code << 1) | bits[pos]
            pos += 1
            if length in first_code and 0 <= code - first_code[length] < n_of[length]:
                out.append(syms[first_index[length] + code - first_code[length]])
                break
        else:
            raise BitstreamError("invalid Huffman codeword", start)
    if pos != nbits:
        raise BitstreamError("stray bits after last symbol", pos)
    return np.array(out, dtype=np.int64)
