"""Versioned, length-prefixed binary container for named float/int arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"AMIGOBIN"
    version    u32
    kind       u32 length + utf-8 bytes   ("graph", "checkpoint", ...)
    schema     32 bytes  sha256 of the schema string for ``kind``
    header     u64 length + utf-8 JSON (sorted keys)
    arrays     per entry: u64 length + raw bytes, in header["arrays"] order

The JSON header lists each array's name, dtype and shape. Output is a pure
function of the inputs, so rewriting the same content gives identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import DataError

MAGIC = b"AMIGOBIN"
VERSION = 1

SCHEMAS = {
    "graph": "graph/v1:image_id,patient_id,modality,image_extent;arrays=node_features:f8,positions:f8,edges:i8",
    "checkpoint": "checkpoint/v1:layout,model_config,meta;arrays=<named f8 parameters>",
}


def schema_hash(kind: str) -> bytes:
    return hashlib.sha256(SCHEMAS[kind].encode()).digest()


def dumps(kind: str, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = sorted(arrays)
    meta = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iub":
            arr = arr.astype("<i8", copy=False)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        meta.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    full_header = dict(header)
    full_header["arrays"] = meta
    head = json.dumps(full_header, sort_keys=True, separators=(",", ":")).encode()
    kind_b = kind.encode()
    out = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<I", len(kind_b)),
        kind_b,
        schema_hash(kind),
        struct.pack("<Q", len(head)),
        head,
    ]
    for blob in blobs:
        out.append(struct.pack("<Q", len(blob)))
        out.append(blob)
    return b"".join(out)


def loads(data: bytes, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise DataError("truncated container")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise DataError("not an amigo container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    (klen,) = struct.unpack("<I", take(4))
    got_kind = take(klen).decode()
    if got_kind != kind:
        raise DataError(f"expected a {kind!r} container, found {got_kind!r}")
    if take(32) != schema_hash(kind):
        raise DataError(f"schema hash mismatch for {kind!r} container")
    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(take(hlen).decode())
    arrays = {}
    for entry in header.pop("arrays"):
        (n,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(n), dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def write(path: str | Path, kind: str, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(kind, header, arrays))
    return path


def read(path: str | Path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
