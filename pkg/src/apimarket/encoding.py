"""Canonical byte encoding used for every hash in the package.

Values are encoded as a one-byte type tag followed by a fixed-width or
length-prefixed body:

* ``N`` none, ``T``/``F`` booleans
* ``I`` signed 64-bit big-endian integer
* ``D`` IEEE-754 binary64, big-endian bit pattern
* ``B`` bytes and ``S`` UTF-8 text, each prefixed by an unsigned 64-bit length
* ``L`` sequence, prefixed by its element count

Records are encoded by their callers as sequences whose first element is
the record name, so field order is the declaration order.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Any, Iterable, Sequence

_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")
_F64 = struct.Struct(">d")

ZERO_HASH = bytes(32)


class DecodeError(ValueError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def encode(obj: Any) -> bytes:
    out = bytearray()
    _encode_into(obj, out)
    return bytes(out)


def _encode_into(obj: Any, out: bytearray) -> None:
    if obj is None:
        out += b"N"
    elif obj is True:
        out += b"T"
    elif obj is False:
        out += b"F"
    elif isinstance(obj, int):
        out += b"I"
        out += _I64.pack(obj)
    elif isinstance(obj, float):
        out += b"D"
        out += _F64.pack(obj)
    elif isinstance(obj, (bytes, bytearray)):
        out += b"B"
        out += _U64.pack(len(obj))
        out += obj
    elif isinstance(obj, str):
        raw = obj.encode("utf-8")
        out += b"S"
        out += _U64.pack(len(raw))
        out += raw
    elif isinstance(obj, (list, tuple)):
        out += b"L"
        out += _U64.pack(len(obj))
        for item in obj:
            _encode_into(item, out)
    else:
        raise TypeError(f"cannot canonically encode {type(obj).__name__}")


def decode(data: bytes) -> Any:
    """Inverse of :func:`encode`; sequences come back as tuples."""
    obj, pos = _decode_at(data, 0)
    if pos != len(data):
        raise DecodeError(f"trailing bytes at offset {pos}")
    return obj


def _take(data: bytes, pos: int, n: int) -> tuple[bytes, int]:
    end = pos + n
    if end > len(data):
        raise DecodeError("truncated input")
    return data[pos:end], end


def _decode_at(data: bytes, pos: int) -> tuple[Any, int]:
    tag, pos = _take(data, pos, 1)
    if tag == b"N":
        return None, pos
    if tag == b"T":
        return True, pos
    if tag == b"F":
        return False, pos
    if tag == b"I":
        raw, pos = _take(data, pos, 8)
        return _I64.unpack(raw)[0], pos
    if tag == b"D":
        raw, pos = _take(data, pos, 8)
        return _F64.unpack(raw)[0], pos
    if tag in (b"B", b"S"):
        raw, pos = _take(data, pos, 8)
        body, pos = _take(data, pos, _U64.unpack(raw)[0])
        return (bytes(body) if tag == b"B" else body.decode("utf-8")), pos
    if tag == b"L":
        raw, pos = _take(data, pos, 8)
        items = []
        for _ in range(_U64.unpack(raw)[0]):
            item, pos = _decode_at(data, pos)
            items.append(item)
        return tuple(items), pos
    raise DecodeError(f"unknown tag {tag!r} at offset {pos - 1}")


def as_value(values: Iterable[float]) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


def encode_value(values: Sequence[float]) -> bytes:
    return encode(("Value", as_value(values)))


def hash_value(values: Sequence[float]) -> bytes:
    """Digest of a data vector, as recorded for inputs/outputs on the ledger."""
    return sha256(encode_value(values))


def float_to_text(x: float) -> str:
    # repr is the shortest string that round-trips the binary64 value
    return repr(float(x))


def text_to_float(s: str) -> float:
    return float(s)
