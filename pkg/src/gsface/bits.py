"""MSB-first bit packing shared by the parameter codec and the model codec."""

from __future__ import annotations

import numpy as np


class BitstreamError(ValueError):
    """Raised when a bitstream ends early or holds an invalid codeword."""

    def __init__(self, message: str, bit_offset: int | None = None):
        self.bit_offset = bit_offset
        if bit_offset is not None:
            message = f"{message} (bit offset {bit_offset})"
        super().__init__(message)


class BitWriter:
    def __init__(self) -> None:
        self._acc = 0
        self._nbits = 0

    def __len__(self) -> int:
        return self._nbits

    def write(self, value: int, width: int) -> None:
        if width == 0:
            return
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nbits += width

    def write_bits(self, bits: str) -> None:
        if bits:
            self.write(int(bits, 2), len(bits))

    def align(self) -> int:
        """Zero-pad to the next byte boundary; returns the number of pad bits."""
        pad = -self._nbits % 8
        self.write(0, pad)
        return pad

    def getvalue(self) -> bytes:
        pad = -self._nbits % 8
        return (self._acc << pad).to_bytes((self._nbits + pad) // 8, "big")


class BitReader:
    def __init__(self, data: bytes, start_bit: int = 0, end_bit: int | None = None):
        data = bytes(data)
        self._bits = format(int.from_bytes(data, "big"), f"0{len(data) * 8}b") if data else ""
        self._total = len(self._bits) if end_bit is None else end_bit
        self.pos = start_bit

    @classmethod
    def from_bitstring(cls, bits: str) -> "BitReader":
        reader = cls(b"")
        reader._bits, reader._total = bits, len(bits)
        return reader

    @property
    def remaining(self) -> int:
        return self._total - self.pos

    def read(self, width: int) -> int:
        if width == 0:
            return 0
        if width > self.remaining:
            raise BitstreamError(f"need {width} bits, {self.remaining} left", self.pos)
        value = int(self._bits[self.pos:self.pos + width], 2)
        self.pos += width
        return value

    def read_bit(self) -> int:
        return self.read(1)

    def count_leading_zeros(self) -> int:
        """Number of zero bits before the next one bit, without consuming them."""
        one = self._bits.find("1", self.pos, self._total)
        if one < 0:
            raise BitstreamError("no terminating one bit before end of stream", self.pos)
        return one - self.pos

    def align(self) -> None:
        self.pos += -self.pos % 8


def pack_fields(values: np.ndarray, widths: np.ndarray) -> tuple[bytes, int]:
    """Pack each ``values[i]`` MSB-first into ``widths[i]`` bits, back to back.

    Returns the packed bytes (zero-padded at the end) and the exact bit count.
    Widths up to 63 are supported.
    """
    values = np.asarray(values, dtype=np.int64).ravel()
    widths = np.asarray(widths, dtype=np.int64).ravel()
    if values.shape != widths.shape:
        raise ValueError("values and widths must have the same shape")
    if values.size == 0:
        return b"", 0
    if widths.min() < 0 or widths.max() > 63:
        raise ValueError("field widths must be in [0, 63]")
    max_width = int(widths.max())
    if max_width == 0:
        return b"", 0
    shifts = np.arange(max_width - 1, -1, -1, dtype=np.int64)
    # row i holds field i right-aligned in max_width bits; the mask keeps its low widths[i] bits
    matrix = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    keep = shifts < widths[:, None]
    bits = matrix[keep]
    return np.packbits(bits).tobytes(), int(bits.size)


def unpack_bits(data: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8))


def read_fields(bits: np.ndarray, positions: np.ndarray, widths: np.ndarray | int) -> np.ndarray:
    """Read MSB-first unsigned fields from an unpacked bit array, vectorized."""
    positions = np.asarray(positions, dtype=np.int64)
    widths = np.broadcast_to(np.asarray(widths, dtype=np.int64), positions.shape)
    if positions.size == 0:
        return np.zeros(positions.shape, dtype=np.int64)
    max_width = int(widths.max())
    if max_width == 0:
        return np.zeros(positions.shape, dtype=np.int64)
    end = positions + widths
    if int(end.max()) > bits.size:
        raise BitstreamError("field runs past end of data", int(positions.max()))
    out = np.zeros(positions.shape, dtype=np.int64)
    uniform = bool(np.all(widths == max_width))
    for j in range(max_width):
        if uniform:
            out = (out << 1) | bits[positions + j]
        else:
            live = j < widths
            step = bits[np.minimum(positions + j, bits.size - 1)]
            out = np.where(live, (out << 1) | step, out)
    return out
