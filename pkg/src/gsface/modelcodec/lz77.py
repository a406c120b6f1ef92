"""Sliding-window LZ77 with a fixed bit-level token format.

Stream: ``raw_len:u32`` then MSB-first tokens, zero-padded to a byte:
literal = ``0`` + 8-bit byte; match = ``1`` + 15-bit (distance - 1) + 8-bit
(length - 3).
"""

from __future__ import annotations

import struct

import numpy as np

from ..bits import BitstreamError, pack_fields

WINDOW = 1 << 15
MIN_MATCH = 3
MAX_MATCH = 258
MAX_CHAIN = 24
_LEN = struct.Struct("<I")


class LZ77Error(BitstreamError):
    pass


def _match_length(data: bytes, cand: int, pos: int, limit: int) -> int:
    # longest n <= limit with data[cand:cand+n] == data[pos:pos+n]; slices compare in C
    if data[cand:cand + limit] == data[pos:pos + limit]:
        return limit
    lo, hi = 0, limit
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if data[cand:cand + mid] == data[pos:pos + mid]:
            lo = mid
        else:
            hi = mid
    return lo


def tokenize(data: bytes, max_chain: int = MAX_CHAIN) -> list[tuple[int, int]]:
    """Greedy parse into (distance, length) matches; distance 0 marks a literal (length = byte)."""
    data = bytes(data)
    n = len(data)
    head: dict[bytes, int] = {}
    prev = [-1] * n
    tokens: list[tuple[int, int]] = []
    pos = 0

    def insert(i: int) -> None:
        key = data[i:i + MIN_MATCH]
        prev[i] = head.get(key, -1)
        head[key] = i

    while pos < n:
        best_len, best_dist = 0, 0
        limit = min(MAX_MATCH, n - pos)
        if limit >= MIN_MATCH:
            cand = head.get(data[pos:pos + MIN_MATCH], -1)
            chain = 0
            while cand >= 0 and pos - cand <= WINDOW and chain < max_chain:
                # overlapping matches are fine: the decoder copies byte by byte
                length = _match_length(data, cand, pos, limit)
                if length > best_len:
                    best_len, best_dist = length, pos - cand
                    if length == limit:
                        break
                cand = prev[cand]
                chain += 1
        if best_len >= MIN_MATCH:
            tokens.append((best_dist, best_len))
            for i in range(pos, min(pos + best_len, n - MIN_MATCH + 1)):
                insert(i)
            pos += best_len
        else:
            tokens.append((0, data[pos]))
            if pos <= n - MIN_MATCH:
                insert(pos)
            pos += 1
    return tokens


def compress(data: bytes, max_chain: int = MAX_CHAIN) -> bytes:
    tokens = tokenize(data, max_chain)
    if not tokens:
        return _LEN.pack(0)
    arr = np.array(tokens, dtype=np.int64)
    is_match = arr[:, 0] > 0
    values = np.where(is_match, (1 << 23) | ((arr[:, 0] - 1) << 8) | (arr[:, 1] - MIN_MATCH), arr[:, 1])
    widths = np.where(is_match, 24, 9)
    packed, _ = pack_fields(values, widths)
    return _LEN.pack(len(data)) + packed


def decompress(blob: bytes) -> bytes:
    blob = bytes(blob)
    if len(blob) < _LEN.size:
        raise LZ77Error("stream shorter than its length header", 0)
    (raw_len,) = _LEN.unpack_from(blob, 0)
    bits = "".join(f"{b:08b}" for b in blob[_LEN.size:]) if len(blob) > _LEN.size else ""
    total = len(bits)
    out = bytearray()
    pos = 0
    while len(out) < raw_len:
        start = pos + 8 * _LEN.size
        if pos + 9 > total:
            raise LZ77Error(f"stream ended after {len(out)} of {raw_len} bytes", start)
        if bits[pos] == "0":
            out.append(int(bits[pos + 1:pos + 9], 2))
            pos += 9
            continue
        if pos + 24 > total:
            raise LZ77Error("stream ended inside a match token", start)
        dist = int(bits[pos + 1:pos + 16], 2) + 1
        length = int(bits[pos + 16:pos + 24], 2) + MIN_MATCH
        pos += 24
        if dist > len(out):
            raise LZ77Error(f"match distance {dist} reaches before start of output ({len(out)} bytes written)", start)
        if len(out) + length > raw_len:
            raise LZ77Error("match runs past declared length", start)
        if dist >= length:
            start_at = len(out) - dist
            out += out[start_at:start_at + length]
        else:
            piece = out[-dist:]
            out += (piece * (length // dist + 1))[:length]
    if total - pos >= 8 or bits[pos:].strip("0"):
        raise LZ77Error("trailing data after final token", pos + 8 * _LEN.size)
    return bytes(out)
