"""NSF container: a tiny self-describing binary format for named arrays.

Layout (all integers little-endian)::

    b"NSRF"                magic, 4 bytes
    u32                    version (1)
    u64                    header length in bytes
    header                 UTF-8 JSON {"fields": [{"name", "dtype", "shape"}], "meta": {...}}
    payload                arrays in header order, little-endian, row-major

Used for dataset samples and for model checkpoints.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from equiflow.errors import BadMagic, ShapeMismatch, TruncatedPayload, VersionUnsupported

MAGIC = b"NSRF"
VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "i64": np.dtype("<i8")}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}
_PREFIX = struct.Struct("<4sIQ")


def _dtype_name(a: np.ndarray) -> str:
    dt = a.dtype.newbyteorder("<")
    if dt in _DTYPE_NAMES:
        return _DTYPE_NAMES[dt]
    raise ShapeMismatch(f"unsupported dtype {a.dtype}; use float32, float64 or int64")


def encode(fields: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    arrays = {name: np.asarray(a) for name, a in fields.items()}
    header = {
        "fields": [{"name": n, "dtype": _dtype_name(a), "shape": list(a.shape)} for n, a in arrays.items()],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    for spec, a in zip(header["fields"], arrays.values()):
        parts.append(np.ascontiguousarray(a, dtype=DTYPES[spec["dtype"]]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise TruncatedPayload("file shorter than the fixed prefix")
    magic, version, head_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise VersionUnsupported(f"version {version} (supported: {VERSION})")
    start = _PREFIX.size
    if len(buf) < start + head_len:
        raise TruncatedPayload("header extends past end of file")
    header = json.loads(buf[start : start + head_len].decode("utf-8"))
    offset = start + head_len
    fields: dict[str, np.ndarray] = {}
    for spec in header["fields"]:
        dt = DTYPES.get(spec["dtype"])
        if dt is None:
            raise ShapeMismatch(f"field {spec['name']!r} has unknown dtype {spec['dtype']!r}")
        shape = tuple(int(d) for d in spec["shape"])
        if any(d < 0 for d in shape):
            raise ShapeMismatch(f"field {spec['name']!r} has a negative extent")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(buf):
            raise TruncatedPayload(f"field {spec['name']!r} needs {nbytes} bytes, {len(buf) - offset} left")
        fields[spec["name"]] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise ShapeMismatch(f"{len(buf) - offset} trailing bytes after declared fields")
    return fields, header.get("meta", {})


def write(path: str | os.PathLike, fields: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(fields, meta))
    os.replace(tmp, path)


def read(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
