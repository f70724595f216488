"""Binary checkpoint format for named float64 parameter maps.

Layout (all integers little-endian)::

    b"WTALCKPT\\0"   magic, 9 bytes
    u8              version (1)
    u32             metadata length, then that many bytes of UTF-8 JSON
    u32             parameter count
    per parameter:  u32 name length, UTF-8 name, u8 ndim, u32 dims[ndim],
                    f64 payload in row-major order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"WTALCKPT\0"
VERSION = 1


def checkpoint_bytes(params, meta=None):
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<BI", VERSION, len(meta_blob)), meta_blob,
             struct.pack("<I", len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f8")  # tobytes() is row-major
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, params, meta=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def parse_checkpoint(blob):
    """Decode checkpoint bytes into ``(params, meta)``; params keep file order."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version, meta_len = struct.unpack("<BI", take(5))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("checkpoint metadata is not valid JSON") from exc
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint payload")
    return params, meta


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
