"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HMLB"                     magic
    uint32                      format version
    uint32                      byte length N of the metadata document
    N bytes                     UTF-8 JSON metadata (sorted keys)
    payload                     raw IEEE-754 tensors, back to back

The metadata carries a ``tensors`` manifest: one ``{name, shape, dtype,
offset, nbytes, crc32}`` entry per tensor, in payload order, with ``offset``
counted from the start of the payload.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"HMLB"
VERSION = 1
_HEADER = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


def _dumps(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def write_checkpoint(path, meta, tensors):
    """Write ``meta`` (JSON-able dict) and ``tensors`` (ordered name -> array)."""
    manifest, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        blobs.append(raw)
        offset += len(raw)
    doc = _dumps(dict(meta, tensors=manifest))
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, len(doc)) + doc + b"".join(blobs))


def read_checkpoint(path):
    """Return ``(meta, tensors)``; raises :class:`CheckpointError` with the failing location."""
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = _HEADER.size + n
    if len(buf) < start:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(buf[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: unreadable metadata ({err})") from err
    tensors = {}
    for entry in meta.get("tensors", []):
        name = entry["name"]
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * dtype.itemsize != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {name!r} shape {shape} inconsistent with {entry['nbytes']} bytes")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(buf):
            raise CheckpointError(f"{path}: tensor {name!r} truncated")
        raw = buf[lo:hi]
        if zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"{path}: tensor {name!r} failed its checksum")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return meta, tensors
