"""Versioned binary container for model checkpoints.

Layout (little-endian)::

    bytes 0-3   b"FZDC"
    byte  4     u8 container version (1)
    bytes 5-8   u32 header length H
    H bytes     UTF-8 JSON header, keys sorted, no whitespace:
                {"kind": str, "meta": {...},
                 "arrays": [{"name": str, "shape": [...], "dtype": "<f8"}, ...]}
    payload     each array's raw bytes, in header order

No timestamps are written, so identical inputs give identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"FZDC"
VERSION = 1
_PREFIX = struct.Struct("<4sBI")


def write_container(path, kind, arrays, meta=None):
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(dtype, copy=False)
        specs.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {"kind": kind, "meta": meta or {}, "arrays": specs},
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_container(path, kind=None):
    """Return ``(kind, arrays, meta)``; raises FormatError on any mismatch."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated container")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"{path}: container version {version}, expected {VERSION}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    if kind is not None and header["kind"] != kind:
        raise FormatError(f"{path}: holds a {header['kind']!r} checkpoint, expected {kind!r}")
    offset = _PREFIX.size + hlen
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise FormatError(f"{path}: payload truncated in array {spec['name']!r}")
        arrays[spec["name"]] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
            .reshape(spec["shape"])
            .copy()
        )
        offset = end
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header["kind"], arrays, header["meta"]
