import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsface.bits import BitReader, BitstreamError, BitWriter, pack_fields, read_fields, unpack_bits


def test_writer_reader_round_trip():
    w = BitWriter()
    w.write(5, 3)
    w.write(0, 0)
    w.write_bits("0110")
    w.write(1023, 10)
    assert len(w) == 17
    assert w.align() == 7
    data = w.getvalue()
    assert len(data) == 3
    r = BitReader(data)
    assert (r.read(3), r.read(4), r.read(10)) == (5, 6, 1023)
    r.align()
    assert r.remaining == 0


def test_writer_rejects_oversized_value():
    with pytest.raises(ValueError):
        BitWriter().write(8, 3)


def test_reader_reports_offset_on_overrun():
    r = BitReader(b"\xff")
    r.read(5)
    with pytest.raises(BitstreamError) as info:
        r.read(4)
    assert info.value.bit_offset == 5


@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 2**40 - 1)), max_size=200))
def test_pack_fields_matches_writer(fields):
    widths = np.array([w for w, _ in fields], dtype=np.int64)
    values = np.array([v & ((1 << w) - 1) for w, v in fields], dtype=np.int64)
    writer = BitWriter()
    for v, w in zip(values.tolist(), widths.tolist()):
        writer.write(v, w)
    data, nbits = pack_fields(values, widths)
    assert nbits == len(writer)
    assert data == writer.getvalue()
    if values.size:
        pos = np.concatenate([[0], np.cumsum(widths)[:-1]])
        assert np.array_equal(read_fields(unpack_bits(data), pos, widths), values)


def test_read_fields_past_end():
    bits = unpack_bits(b"\x0f")
    with pytest.raises(BitstreamError):
        read_fields(bits, np.array([6]), 4)
