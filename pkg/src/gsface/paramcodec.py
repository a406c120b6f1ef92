"""Facial-parameter bitstream: quantize, predict, zigzag, order-0 Exp-Golomb.

Each frame carries the truncated expression vector followed by the 11 pose
values.  INTRA frames store every quantized value in ``bit_depth`` bits; INTER
frames store ``eg0(zigzag(q - q_prev))`` per dimension, where ``q_prev`` is
the previous frame's *quantized* vector (closed loop).  Frames are zero-padded
to a byte boundary.  Frame ``i`` is INTRA iff ``i % intra_period == 0``.

Stream layout (little-endian)::

    "GFPC" version:u16 dim_psi:u16 dim_theta:u16 bit_depth:u8 fps:f32
    intra_period:u32 n_frames:u32 (min:f32 max:f32) x (dim_psi + dim_theta)
    frame 0 | frame 1 | ...
"""

from __future__ import annotations

import enum
import functools
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .bits import BitReader, BitstreamError, BitWriter, pack_fields, read_fields, unpack_bits
from .head import THETA_DIM

MAGIC = b"GFPC"
VERSION = 1
BIT_DEPTHS = (8, 10)
DEFAULT_FPS = 25.0
DEFAULT_INTRA_PERIOD = 100

_HEADER = struct.Struct("<4sHHHBfII")


class FrameType(enum.IntEnum):
    INTRA = 0
    INTER = 1


class StreamError(ValueError):
    """Malformed parameter stream; carries the frame index and bit offset when known."""

    def __init__(self, message: str, frame: int | None = None, bit_offset: int | None = None):
        self.frame = frame
        self.bit_offset = bit_offset
        where = []
        if frame is not None:
            where.append(f"frame {frame}")
        if bit_offset is not None:
            where.append(f"bit offset {bit_offset}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


@dataclass
class StreamHeader:
    dim_psi: int
    bit_depth: int
    ranges: np.ndarray                 # (dim_psi + dim_theta) x 2, float32 values
    fps: float = DEFAULT_FPS
    intra_period: int = DEFAULT_INTRA_PERIOD
    n_frames: int = 0
    dim_theta: int = THETA_DIM

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=np.float32).astype(np.float64).reshape(-1, 2)
        if self.bit_depth not in BIT_DEPTHS:
            raise ValueError(f"bit depth must be one of {BIT_DEPTHS}")
        if self.dim_psi < 1:
            raise ValueError("stream must carry at least one expression coefficient")
        if self.ranges.shape[0] != self.dims:
            raise ValueError(f"need {self.dims} ranges, got {self.ranges.shape[0]}")
        if np.any(self.ranges[:, 1] <= self.ranges[:, 0]):
            raise ValueError("every quantizer range needs max > min")
        if self.intra_period < 1:
            raise ValueError("intra period must be >= 1")

    @property
    def dims(self) -> int:
        return self.dim_psi + self.dim_theta

    @property
    def levels(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def step(self) -> np.ndarray:
        return (self.ranges[:, 1] - self.ranges[:, 0]) / self.levels

    def frame_type(self, index: int) -> FrameType:
        return FrameType.INTRA if index % self.intra_period == 0 else FrameType.INTER

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.dim_psi, self.dim_theta, self.bit_depth, self.fps,
                            self.intra_period, self.n_frames)
        return head + self.ranges.astype("<f4").tobytes()

    @property
    def nbytes(self) -> int:
        return _HEADER.size + 8 * self.dims

    @classmethod
    def from_bytes(cls, data: bytes) -> "StreamHeader":
        if len(data) < _HEADER.size:
            raise StreamError("stream shorter than its header", bit_offset=8 * len(data))
        magic, version, dim_psi, dim_theta, depth, fps, period, n_frames = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise StreamError(f"bad magic {magic!r}", bit_offset=0)
        if version != VERSION:
            raise StreamError(f"unsupported version {version}", bit_offset=32)
        dims = dim_psi + dim_theta
        if len(data) < _HEADER.size + 8 * dims:
            raise StreamError("stream truncated inside quantizer ranges", bit_offset=8 * len(data))
        ranges = np.frombuffer(data, "<f4", 2 * dims, _HEADER.size).reshape(dims, 2)
        try:
            return cls(dim_psi, depth, ranges, float(fps), period, n_frames, dim_theta)
        except ValueError as exc:
            raise StreamError(f"invalid header: {exc}", bit_offset=0) from exc


@dataclass
class CodedFrame:
    frame_type: FrameType
    payload: bytes
    nbits: int            # payload bits before byte alignment
    psi_bits: int = 0
    theta_bits: int = 0


# -- scalar tools --------------------------------------------------------------

def truncate_expression(psi: np.ndarray, k: int) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if k < 1:
        raise ValueError("must keep at least one expression coefficient")
    if k > psi.shape[-1]:
        raise ValueError(f"cannot keep {k} of {psi.shape[-1]} coefficients")
    return psi[..., :k].copy()


def pad_expression(psi: np.ndarray, width: int) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape[-1] > width:
        raise ValueError(f"expression vector wider ({psi.shape[-1]}) than {width}")
    out = np.zeros(psi.shape[:-1] + (width,))
    out[..., : psi.shape[-1]] = psi
    return out


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, lo, hi, bits: int) -> np.ndarray:
    """Uniform quantizer to [0, 2^bits - 1], half-away rounding, clamped."""
    levels = (1 << bits) - 1
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(hi <= lo):
        raise ValueError("quantizer range needs max > min")
    q = round_half_away((np.asarray(x, dtype=np.float64) - lo) / (hi - lo) * levels)
    return np.clip(q, 0, levels).astype(np.int64)


def dequantize(q, lo, hi, bits: int) -> np.ndarray:
    levels = (1 << bits) - 1
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + np.asarray(q, dtype=np.float64) * ((hi - lo) / levels)


def zigzag(s):
    s = np.asarray(s, dtype=np.int64)
    out = np.where(s >= 0, 2 * s, -2 * s - 1)
    return int(out) if out.ndim == 0 else out


def unzigzag(u):
    u = np.asarray(u, dtype=np.int64)
    out = np.where(u % 2 == 0, u // 2, -(u + 1) // 2)
    return int(out) if out.ndim == 0 else out


def eg0_encode(n: int) -> str:
    if n < 0:
        raise ValueError("Exp-Golomb codes nonnegative integers only")
    binary = format(n + 1, "b")
    return "0" * (len(binary) - 1) + binary


def eg0_read(reader: BitReader) -> int:
    zeros = reader.count_leading_zeros()
    start = reader.pos
    if 2 * zeros + 1 > reader.remaining:
        raise BitstreamError("Exp-Golomb codeword runs past end of data", start)
    reader.pos += zeros
    return reader.read(zeros + 1) - 1


def eg0_decode(bits: str) -> tuple[int, int]:
    """Decode one codeword from the front of a '0'/'1' string: (value, bits consumed)."""
    reader = BitReader.from_bitstring(bits)
    n = eg0_read(reader)
    return n, reader.pos


def eg0_length(n: np.ndarray) -> np.ndarray:
    """Codeword lengths 2*floor(log2(n+1)) + 1, vectorized and exact."""
    _, exp = np.frexp(np.asarray(n, dtype=np.float64) + 1.0)
    return 2 * exp.astype(np.int64) - 1


# -- calibration ---------------------------------------------------------------

def calibrate_ranges(frames: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Per-dimension (min, max) over a calibration pass, as float32 values.

    Constant dimensions get a +-1 window so every range has max > min.
    """
    frames = np.asarray(frames, dtype=np.float64)
    lo = frames.min(axis=0)
    hi = frames.max(axis=0)
    pad = (hi - lo) * margin
    lo, hi = lo - pad, hi + pad
    flat = (hi - lo) < 1e-6
    lo = np.where(flat, lo - 1.0, lo)
    hi = np.where(flat, hi + 1.0, hi)
    lo32 = lo.astype(np.float32)
    hi32 = hi.astype(np.float32)
    # round outward so the stored float32 range still covers the data
    lo32 = np.where(lo32 > lo, np.nextafter(lo32, np.float32(-np.inf)), lo32)
    hi32 = np.where(hi32 < hi, np.nextafter(hi32, np.float32(np.inf)), hi32)
    return np.stack([lo32, hi32], axis=1).astype(np.float64)


def make_header(frames: np.ndarray, dim_psi: int, bit_depth: int = 8, fps: float = DEFAULT_FPS,
                intra_period: int = DEFAULT_INTRA_PERIOD, ranges: np.ndarray | None = None) -> StreamHeader:
    frames = np.asarray(frames, dtype=np.float64)
    if ranges is None:
        ranges = calibrate_ranges(frames)
    return StreamHeader(dim_psi, bit_depth, ranges, fps, intra_period, len(frames))


# -- per-frame reference path ---------------------------------------------------

def quantize_frame(values: np.ndarray, header: StreamHeader) -> tuple[np.ndarray, int]:
    """Quantized integers and the number of clamped (out-of-range) dimensions."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = header.ranges[:, 0], header.ranges[:, 1]
    clamped = int(np.sum((values < lo) | (values > hi)))
    return quantize(values, lo, hi, header.bit_depth), clamped


def encode_frame(values: np.ndarray, prev_q: np.ndarray | None, header: StreamHeader,
                 frame_type: FrameType | None = None) -> tuple[CodedFrame, np.ndarray]:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.shape[0] != header.dims:
        raise ValueError(f"frame has {values.shape[0]} values, header expects {header.dims}")
    if frame_type is None:
        frame_type = FrameType.INTRA if prev_q is None else FrameType.INTER
    q, _ = quantize_frame(values, header)
    writer = BitWriter()
    widths = []
    if frame_type == FrameType.INTRA:
        for v in q:
            writer.write(int(v), header.bit_depth)
        widths = [header.bit_depth] * header.dims
    else:
        if prev_q is None:
            raise ValueError("INTER frame needs the previous quantized state")
        prev_q = np.asarray(prev_q)
        if prev_q.shape != q.shape:
            raise ValueError(f"predictor state has shape {prev_q.shape}, expected {q.shape}")
        for r in (q - prev_q).tolist():
            code = eg0_encode(zigzag(r))
            writer.write_bits(code)
            widths.append(len(code))
    nbits = len(writer)
    writer.align()
    psi_bits = int(sum(widths[: header.dim_psi]))
    return CodedFrame(frame_type, writer.getvalue(), nbits, psi_bits, nbits - psi_bits), q


def decode_frame(frame: CodedFrame | bytes, prev_q: np.ndarray | None, header: StreamHeader,
                 frame_type: FrameType | None = None, index: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(dequantized values, quantized integers) for one byte-aligned frame."""
    if isinstance(frame, CodedFrame):
        frame_type, payload = frame.frame_type, frame.payload
    else:
        payload = frame
        if frame_type is None:
            raise ValueError("frame type required when decoding raw bytes")
    reader = BitReader(payload)
    try:
        if frame_type == FrameType.INTRA:
            q = np.array([reader.read(header.bit_depth) for _ in range(header.dims)], dtype=np.int64)
        else:
            if prev_q is None:
                raise StreamError("INTER frame without predictor state", index)
            res = [unzigzag(eg0_read(reader)) for _ in range(header.dims)]
            q = np.asarray(prev_q, dtype=np.int64) + np.asarray(res, dtype=np.int64)
    except BitstreamError as exc:
        raise StreamError(f"malformed frame: {exc}", index, exc.bit_offset) from exc
    if np.any(q < 0) or np.any(q > header.levels):
        raise StreamError("decoded value outside quantizer range", index, reader.pos)
    lo, hi = header.ranges[:, 0], header.ranges[:, 1]
    return dequantize(q, lo, hi, header.bit_depth), q


# -- stream path ------------------------------------------------------------------

@dataclass
class StreamStats:
    frame_bytes: np.ndarray
    psi_bits: int
    theta_bits: int
    pad_bits: int
    clamped: int
    header_bytes: int
    total_bytes: int
    fps: float
    n_frames: int
    frame_types: np.ndarray = field(repr=False, default=None)

    @property
    def kbps(self) -> float:
        return self.total_bytes * 8 * self.fps / self.n_frames / 1000.0

    @property
    def payload_kbps(self) -> float:
        return int(self.frame_bytes.sum()) * 8 * self.fps / self.n_frames / 1000.0

    @property
    def expression_share(self) -> float:
        """Expression codeword bits over all codeword bits (alignment padding excluded)."""
        return self.psi_bits / (self.psi_bits + self.theta_bits)


def _frame_types(n: int, period: int) -> np.ndarray:
    return np.where(np.arange(n) % period == 0, FrameType.INTRA, FrameType.INTER)


def encode_stream(frames: np.ndarray, header: StreamHeader) -> tuple[bytes, StreamStats, np.ndarray]:
    """Encode F x dims values; returns (stream bytes, stats, quantized integers)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != header.dims:
        raise ValueError(f"frames must be F x {header.dims}")
    n = frames.shape[0]
    if n < 1:
        raise ValueError("need at least one frame")
    header.n_frames = n
    lo, hi = header.ranges[:, 0], header.ranges[:, 1]
    clamped = int(np.sum((frames < lo) | (frames > hi)))
    q = quantize(frames, lo, hi, header.bit_depth)
    types = _frame_types(n, header.intra_period)
    intra = types == FrameType.INTRA

    resid = np.diff(q, axis=0, prepend=q[:1])
    zz = zigzag(resid)
    values = np.where(intra[:, None], q, zz + 1)
    widths = np.where(intra[:, None], header.bit_depth, eg0_length(zz))
    frame_bits = widths.sum(axis=1)
    pad = -frame_bits % 8
    all_values = np.concatenate([values, np.zeros((n, 1), dtype=np.int64)], axis=1)
    all_widths = np.concatenate([widths, pad[:, None]], axis=1)
    payload, _ = pack_fields(all_values.ravel(), all_widths.ravel())

    head = header.to_bytes()
    data = head + payload
    stats = StreamStats(
        frame_bytes=(frame_bits + pad) // 8,
        psi_bits=int(widths[:, : header.dim_psi].sum()),
        theta_bits=int(widths[:, header.dim_psi:].sum()),
        pad_bits=int(pad.sum()),
        clamped=clamped,
        header_bytes=len(head),
        total_bytes=len(data),
        fps=header.fps,
        n_frames=n,
        frame_types=types,
    )
    return data, stats, q


def encode_stream_reference(frames: np.ndarray, header: StreamHeader) -> bytes:
    """Frame-by-frame encoder built on encode_frame; byte-identical to encode_stream."""
    frames = np.asarray(frames, dtype=np.float64)
    header.n_frames = len(frames)
    out = [header.to_bytes()]
    prev = None
    for i, row in enumerate(frames):
        coded, prev = encode_frame(row, prev, header, header.frame_type(i))
        out.append(coded.payload)
    return b"".join(out)


@functools.lru_cache(maxsize=None)
def _inter_frame_pattern(dims: int, depth: int) -> re.Pattern:
    """Regex matching exactly ``dims`` Exp-Golomb codewords as a '0'/'1' string.

    A residual of a ``depth``-bit quantizer zigzags below 2^(depth+1) - 1, so a
    valid codeword has at most ``depth`` leading zeros.
    """
    words = "|".join("0" * k + "1" + "[01]" * k for k in range(depth + 1))
    return re.compile(f"(?:{words}){{{dims}}}")


def _bits_to_str(bits: np.ndarray) -> str:
    return (bits + ord("0")).tobytes().decode("ascii")


@dataclass
class DecodedStream:
    header: StreamHeader
    quantized: np.ndarray    # F x dims integers
    values: np.ndarray       # F x dims dequantized
    frame_bytes: np.ndarray


def decode_stream(data: bytes) -> DecodedStream:
    """Vectorized decoder for a whole stream; exact inverse of encode_stream."""
    header = StreamHeader.from_bytes(data)
    n, dims, depth = header.n_frames, header.dims, header.bit_depth
    if n < 1:
        raise StreamError("stream holds no frames")
    payload = data[header.nbytes:]
    bits = unpack_bits(payload)
    text = _bits_to_str(bits)
    total = bits.size
    pattern = _inter_frame_pattern(dims, depth)

    types = _frame_types(n, header.intra_period)
    is_intra = (types == FrameType.INTRA).tolist()
    starts = np.empty(n, dtype=np.int64)
    stops = np.empty(n, dtype=np.int64)
    pos = 0
    intra_bits = dims * depth
    for i in range(n):
        starts[i] = pos
        if is_intra[i]:
            end = pos + intra_bits
            if end > total:
                raise StreamError("stream truncated inside INTRA frame", i, pos)
        else:
            m = pattern.match(text, pos)
            if m is None:
                _locate_inter_error(payload, pos, header, i)
            end = m.end()
        stops[i] = end
        pos = end + (-end % 8)
        if pos > total:
            raise StreamError("frame padding runs past end of stream", i, end)
    if pos != total:
        raise StreamError("trailing data after last frame", n, pos)
    for i in np.flatnonzero(stops % 8):
        if bits[stops[i]: stops[i] + (-stops[i] % 8)].any():
            raise StreamError("nonzero alignment padding", int(i), int(stops[i]))

    q = np.empty((n, dims), dtype=np.int64)
    intra = types == FrameType.INTRA
    if intra.any():
        pos_i = starts[intra][:, None] + depth * np.arange(dims)
        q[intra] = read_fields(bits, pos_i, depth)
    inter_rows = np.flatnonzero(~intra)
    if inter_rows.size:
        ones = np.flatnonzero(bits)
        ones_before = np.cumsum(bits, dtype=np.int32) - bits
        cur = starts[inter_rows].copy()
        cw_pos = np.empty((inter_rows.size, dims), dtype=np.int64)
        zeros = np.empty((inter_rows.size, dims), dtype=np.int64)
        for j in range(dims):
            # every frame end was validated above, so each codeword is in range
            k = ones[ones_before[cur]] - cur
            cw_pos[:, j] = cur
            zeros[:, j] = k
            cur = cur + 2 * k + 1
        coded = read_fields(bits, cw_pos + zeros, zeros + 1) - 1
        q[inter_rows] = unzigzag(coded)
        # closed-loop reconstruction: running sum from each INTRA anchor
        intra_rows = np.flatnonzero(intra)
        bounds = np.r_[intra_rows, n]
        for a, b in zip(bounds[:-1], bounds[1:]):
            q[a:b] = np.cumsum(q[a:b], axis=0)
    bad = (q < 0) | (q > header.levels)
    if bad.any():
        r = int(np.argwhere(bad)[0][0])
        raise StreamError("decoded value outside quantizer range", r, int(starts[r]))
    lo, hi = header.ranges[:, 0], header.ranges[:, 1]
    frame_bytes = (stops - starts + (-stops % 8)) // 8
    return DecodedStream(header, q, dequantize(q, lo, hi, depth), frame_bytes)


def _locate_inter_error(payload: bytes, pos: int, header: StreamHeader, index: int):
    """Re-parse a bad INTER frame codeword by codeword to report where it breaks."""
    reader = BitReader(payload, pos)
    for _ in range(header.dims):
        start = reader.pos
        try:
            zeros = reader.count_leading_zeros()
            if zeros > header.bit_depth:
                raise StreamError("Exp-Golomb codeword too long for the bit depth", index, start)
            eg0_read(reader)
        except BitstreamError as exc:
            raise StreamError(f"stream truncated inside INTER frame: {exc}", index, exc.bit_offset) from exc
    raise StreamError("malformed INTER frame", index, pos)


def decode_stream_reference(data: bytes) -> DecodedStream:
    """Codeword-at-a-time decoder on BitReader; must agree with decode_stream."""
    header = StreamHeader.from_bytes(data)
    if header.n_frames < 1:
        raise StreamError("stream holds no frames")
    q_rows, v_rows, sizes = [], [], []
    prev = None
    reader = BitReader(data[header.nbytes:])
    bit_pos = 0
    for i in range(header.n_frames):
        ftype = header.frame_type(i)
        try:
            if ftype == FrameType.INTRA:
                q = np.array([reader.read(header.bit_depth) for _ in range(header.dims)], dtype=np.int64)
            else:
                if prev is None:
                    raise StreamError("INTER frame without predictor state", i)
                q = prev + np.array([unzigzag(eg0_read(reader)) for _ in range(header.dims)], dtype=np.int64)
        except BitstreamError as exc:
            raise StreamError(f"malformed frame: {exc}", i, exc.bit_offset) from exc
        if np.any(q < 0) or np.any(q > header.levels):
            raise StreamError("decoded value outside quantizer range", i, bit_pos)
        reader.align()
        sizes.append((reader.pos - bit_pos) // 8)
        bit_pos = reader.pos
        prev = q
        q_rows.append(q)
        v_rows.append(dequantize(q, header.ranges[:, 0], header.ranges[:, 1], header.bit_depth))
    return DecodedStream(header, np.array(q_rows), np.array(v_rows), np.array(sizes))
