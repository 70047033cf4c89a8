"""Sorted-run file format.

Each record is ``u32 length`` followed by the body::

    u8 key-field-count, fields...
    u8 value-field-count, fields...

and each field is a one-byte type tag plus payload.  All integers are
little-endian.  Non-negative integers wider than 64 bits (batch identifiers
for large schemas) use the BIGINT tag.
"""

from __future__ import annotations

import struct
from typing import Iterator

TAG_INT = 0
TAG_STR = 1
TAG_FLOAT = 2
TAG_BIGINT = 3
TAG_NONE = 4

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")
_TAGGED_INT = struct.Struct("<Bq")
_TAGGED_FLOAT = struct.Struct("<Bd")
_TAGGED_LEN = struct.Struct("<BI")

_INT_MIN = -(1 << 63)
_INT_MAX = (1 << 63) - 1

_pack_int = _TAGGED_INT.pack
_pack_float = _TAGGED_FLOAT.pack
_pack_len = _TAGGED_LEN.pack
_unpack_i64 = _I64.unpack_from
_unpack_f64 = _F64.unpack_from
_unpack_u32 = _U32.unpack_from


def _field(f) -> bytes:
    t = type(f)
    if t is int:
        if _INT_MIN <= f <= _INT_MAX:
            return _pack_int(TAG_INT, f)
        if f < 0:
            raise ValueError(f"integer {f} does not fit in 64 bits")
        raw = f.to_bytes((f.bit_length() + 7) // 8, "little")
        return _pack_len(TAG_BIGINT, len(raw)) + raw
    if t is str:
        raw = f.encode("utf-8")
        return _pack_len(TAG_STR, len(raw)) + raw
    if t is float:
        return _pack_float(TAG_FLOAT, f)
    if f is None:
        return b"\x04"
    if isinstance(f, bool):
        return _pack_int(TAG_INT, int(f))
    raise TypeError(f"cannot encode field of type {t.__name__}")


_int_structs: dict = {}


def _int_struct(nk: int, nv: int) -> struct.Struct:
    # pad bytes are zero, which is TAG_INT, so all-int records pack in one call
    st = _int_structs.get((nk, nv))
    if st is None:
        st = struct.Struct("<IB" + "xq" * nk + "B" + "xq" * nv)
        _int_structs[(nk, nv)] = st
    return st


_typed_structs: dict = {}


def _typed_struct(sig: tuple):
    """``(Struct, float tag offsets)`` for records of 64-bit ints and floats, else None.

    ``sig`` holds the field types, keys then ``None`` then values.  Every tag
    packs as a zero pad byte; float tags are patched in afterwards.
    """
    found = _typed_structs.get(sig, False)
    if found is not False:
        return found
    found = None
    if all(t is None or t is int or t is float for t in sig):
        fmt = "<IB" + "".join("B" if t is None else ("xq" if t is int else "xd") for t in sig)
        offsets, pos = [], 5
        for t in sig:
            if t is None:
                pos += 1
                continue
            if t is float:
                offsets.append(pos)
            pos += 9
        found = (struct.Struct(fmt), tuple(offsets))
    _typed_structs[sig] = found
    return found


def encode_record(key: tuple, value: tuple, typed_first: bool = False) -> bytes:
    nk, nv = len(key), len(value)
    if not typed_first:
        try:
            return _int_struct(nk, nv).pack(2 + 9 * (nk + nv), nk, *key, nv, *value)
        except struct.error:
            pass
    typed = _typed_struct((*map(type, key), None, *map(type, value)))
    if typed is not None:
        st, offsets = typed
        try:
            out = bytearray(st.pack(2 + 9 * (nk + nv), nk, *key, nv, *value))
        except struct.error:
            pass  # an int outside 64 bits
        else:
            for off in offsets:
                out[off] = TAG_FLOAT
            return bytes(out)
    return encode_generic(key, value)


def encode_generic(key: tuple, value: tuple) -> bytes:
    body = b"".join((
        bytes((len(key),)),
        *map(_field, key),
        bytes((len(value),)),
        *map(_field, value),
    ))
    return _U32.pack(len(body)) + body


def _decode_fields(buf, pos: int, count: int, out: list) -> int:
    for _ in range(count):
        tag = buf[pos]
        if tag == TAG_INT:
            out.append(_unpack_i64(buf, pos + 1)[0])
            pos += 9
        elif tag == TAG_STR:
            n = _unpack_u32(buf, pos + 1)[0]
            out.append(bytes(buf[pos + 5:pos + 5 + n]).decode("utf-8"))
            pos += 5 + n
        elif tag == TAG_FLOAT:
            out.append(_unpack_f64(buf, pos + 1)[0])
            pos += 9
        elif tag == TAG_BIGINT:
            n = _unpack_u32(buf, pos + 1)[0]
            out.append(int.from_bytes(buf[pos + 5:pos + 5 + n], "little"))
            pos += 5 + n
        elif tag == TAG_NONE:
            out.append(None)
            pos += 1
        else:
            raise ValueError(f"corrupt run file: unknown tag {tag}")
    return pos


def decode_body(body) -> tuple:
    key: list = []
    pos = _decode_fields(body, 1, body[0], key)
    value: list = []
    _decode_fields(body, pos + 1, body[pos], value)
    return tuple(key), tuple(value)


_decoders: dict = {}


def _decoder(ktags: bytes, vtags: bytes):
    """Unpacker for one all-fixed-width tag signature, or None."""
    sig = (ktags, vtags)
    st = _decoders.get(sig, False)
    if st is False:
        st = None
        if all(t in (TAG_INT, TAG_FLOAT) for t in ktags + vtags):
            code = {TAG_INT: "xq", TAG_FLOAT: "xd"}
            st = struct.Struct("<IB" + "".join(code[t] for t in ktags) + "B"
                               + "".join(code[t] for t in vtags))
        _decoders[sig] = st
    return st


def _shape(nk: int, nv: int) -> tuple:
    st = struct.Struct("<IB" + "xq" * nk + "B" + "xq" * nv)
    return st, bytes(nk), bytes(nv), 9 * nk

def iter_records(stream, chunk: int = 1 << 20) -> Iterator[tuple]:
    """Decode every record of an open binary stream."""
    shapes: dict = {}
    buf = b""
    pos = 0
    while True:
        data = stream.read(chunk)
        if not data:
            break
        buf = buf[pos:] + data if pos < len(buf) else data
        pos = 0
        end = len(buf)
        while pos + 4 <= end:
            n = _unpack_u32(buf, pos)[0]
            stop = pos + 4 + n
            if stop > end:
                break
            nk = buf[pos + 4]
            shape = shapes.get((n, nk))
            if shape is None:
                nv = (n - 2) // 9 - nk
                shape = _shape(nk, nv) if nv >= 0 and n == 2 + 9 * (nk + nv) else False
                shapes[(n, nk)] = shape
            if shape:
                st, zk, zv, off = shape
                if buf[pos + 5 + off] == len(zv):
                    kt = buf[pos + 5:pos + 5 + off:9]
                    vt = buf[pos + 6 + off:stop:9]
                    if kt != zk or vt != zv:
                        st = _decoder(kt, vt)
                    if st is not None:
                        fields = st.unpack_from(buf, pos)
                        yield fields[2:2 + nk], fields[3 + nk:]
                        pos = stop
                        continue
            yield decode_body(memoryview(buf)[pos + 4:stop])
            pos = stop
    if pos != len(buf):
        raise ValueError("corrupt run file: truncated record")
