"""Sectioned, checksummed file layout shared by "GFAV" and "GFCM" files.

Layout (little-endian)::

    magic[4] version:u16 n_sections:u16 base_hash[32] table_crc:u32
    n_sections x (id:u16 method:u8 reserved:u8 offset:u32 stored_len:u32 raw_len:u32 crc32:u32)
    section payloads, back to back

``crc32`` covers the stored (possibly compressed) payload; ``table_crc``
covers the header fields before it plus the whole section table.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

_HEAD = struct.Struct("<4sHH32s")
_CRC = struct.Struct("<I")
_ENTRY = struct.Struct("<HBBIIII")

METHOD_STORED = 0
METHOD_LZ77 = 1


class ContainerError(ValueError):
    def __init__(self, message: str, offset: int | None = None, section: int | None = None):
        self.offset = offset
        self.section = section
        where = []
        if section is not None:
            where.append(f"section {section}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


@dataclass
class Section:
    id: int
    method: int
    stored: bytes
    raw_len: int


def write_sections(magic: bytes, version: int, base_hash: bytes, sections: list[Section]) -> bytes:
    ids = [s.id for s in sections]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate section ids in {ids}")
    if len(base_hash) != 32:
        raise ValueError("base hash must be 32 bytes")
    head = _HEAD.pack(magic, version, len(sections), base_hash)
    offset = len(head) + _CRC.size + _ENTRY.size * len(sections)
    table = []
    for s in sections:
        table.append(_ENTRY.pack(s.id, s.method, 0, offset, len(s.stored), s.raw_len, zlib.crc32(s.stored)))
        offset += len(s.stored)
    table = b"".join(table)
    crc = _CRC.pack(zlib.crc32(head + table))
    return head + crc + table + b"".join(s.stored for s in sections)


def read_sections(data: bytes, magic: bytes, version: int) -> tuple[bytes, dict[int, Section]]:
    """Parse and verify a sectioned file; returns (base_hash, sections by id)."""
    data = bytes(data)
    if len(data) < _HEAD.size + _CRC.size:
        raise ContainerError("file truncated in header", len(data))
    got_magic, got_version, n, base_hash = _HEAD.unpack_from(data, 0)
    if got_magic != magic:
        raise ContainerError(f"bad magic {got_magic!r}, expected {magic!r}", 0)
    if got_version != version:
        raise ContainerError(f"unsupported version {got_version}", 4)
    table_start = _HEAD.size + _CRC.size
    table_end = table_start + n * _ENTRY.size
    if len(data) < table_end:
        raise ContainerError("file truncated in section table", len(data))
    (crc,) = _CRC.unpack_from(data, _HEAD.size)
    if zlib.crc32(data[: _HEAD.size] + data[table_start:table_end]) != crc:
        raise ContainerError("section table CRC mismatch", _HEAD.size)
    sections: dict[int, Section] = {}
    expected_offset = table_end
    for i in range(n):
        entry_at = table_start + i * _ENTRY.size
        sid, method, _, offset, stored_len, raw_len, sec_crc = _ENTRY.unpack_from(data, entry_at)
        if sid in sections:
            raise ContainerError("duplicate section id", entry_at, sid)
        if offset != expected_offset or offset + stored_len > len(data):
            raise ContainerError("section extends past end of file", offset, sid)
        stored = data[offset: offset + stored_len]
        if zlib.crc32(stored) != sec_crc:
            raise ContainerError("section CRC mismatch", offset, sid)
        sections[sid] = Section(sid, method, stored, raw_len)
        expected_offset = offset + stored_len
    if expected_offset != len(data):
        raise ContainerError("trailing bytes after last section", expected_offset)
    return base_hash, sections
