"""tag(1) | len(2, big-endian) | value -- the one serializer used on the wire."""
from __future__ import annotations

import struct
from typing import Iterable, Iterator

MAX_VALUE_LEN = 0xFFFF


class TlvError(ValueError):
    pass


def encode(items: Iterable[tuple[int, bytes]]) -> bytes:
    out = bytearray()
    for tag, value in items:
        if len(value) > MAX_VALUE_LEN:
            raise TlvError(f"TLV value for tag {tag:#x} too long")
        out += struct.pack("!BH", tag, len(value))
        out += value
    return bytes(out)


def iter_decode(data: bytes) -> Iterator[tuple[int, bytes]]:
    offset = 0
    while offset < len(data):
        if offset + 3 > len(data):
            raise TlvError("truncated TLV header")
        tag, length = struct.unpack_from("!BH", data, offset)
        offset += 3
        if offset + length > len(data):
            raise TlvError("truncated TLV value")
        yield tag, data[offset : offset + length]
        offset += length


def decode_exact(data: bytes, layout: list[tuple[int, bool]]) -> dict[int, bytes]:
    """Decode ``data`` against an ordered layout of (tag, required) pairs.

    Every tag must appear at most once, in layout order, and nothing else may
    appear.  This keeps the encoding canonical: one value, one byte string.
    """
    items = list(iter_decode(data))
    out: dict[int, bytes] = {}
    position = 0
    for tag, required in layout:
        if position < len(items) and items[position][0] == tag:
            out[tag] = items[position][1]
            position += 1
        elif required:
            raise TlvError(f"missing TLV tag {tag:#x}")
    if position != len(items):
        raise TlvError("unexpected or out-of-order TLV tag")
    return out
