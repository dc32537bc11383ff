"""Versioned binary container: magic, JSON header, then named raw array blobs.

Encoding is canonical (sorted-key compact JSON, arrays in insertion order),
so decode followed by encode reproduces the input bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SDBLOB01"
_DTYPES = ("float32", "float64", "int64", "int32", "uint8", "bool")


def encode(meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise TypeError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "blobs": entries}, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def decode(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError("not a blob container (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + hlen])
    base = start + hlen
    arrays = {}
    for e in header["blobs"]:
        lo = base + e["offset"]
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw[lo : lo + e["nbytes"]], dtype=dtype).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header["meta"], arrays


def save(path: str | Path, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(meta, arrays))
    return path


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
