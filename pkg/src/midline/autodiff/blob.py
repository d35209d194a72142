"""Named-tensor weight blobs.

Layout (all integers little-endian uint32)::

    magic b"MLWB" | version | count
    count x [name_len | name (UTF-8) | rank | extents...]
    float32 little-endian data of every tensor, in header order
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"MLWB"
VERSION = 1


class BlobFormatError(ValueError):
    pass


def dumps(params):
    """Serialize an ordered mapping of name -> array-like to bytes."""
    header = [MAGIC, struct.pack("<II", VERSION, len(params))]
    payload = []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value))
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)))
        header.append(raw)
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(header + payload)


def loads(buf):
    """Parse bytes from :func:`dumps` into a dict of float32 arrays."""
    if buf[:4] != MAGIC:
        raise BlobFormatError("not a weight blob (bad magic)")
    pos = 4
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise BlobFormatError(f"unsupported blob version {version}")
        specs = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = bytes(buf[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            specs.append((name, shape))
    except struct.error as exc:
        raise BlobFormatError(f"truncated blob header: {exc}") from None
    out = {}
    for name, shape in specs:
        size = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * size
        if end > len(buf):
            raise BlobFormatError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos = end
    if pos != len(buf):
        raise BlobFormatError(f"{len(buf) - pos} trailing bytes after last tensor")
    return out


def save(path, params):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
