"""Flat binary container for bank, dataset and checkpoint snapshots.

Layout::

    b"DEXSNAP1"                  8-byte magic
    uint64 little-endian         length H of the header
    H bytes                      UTF-8 JSON header
    raw array bytes              concatenated, little-endian, C order

The header carries a ``kind`` string, free-form ``meta`` and an ``arrays``
manifest of ``{name, dtype, shape, offset, nbytes}`` entries whose offsets are
relative to the end of the header. Output is byte-for-byte deterministic.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

MAGIC = b"DEXSNAP1"


class SnapshotError(ValueError):
    pass


def dumps(kind: str, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": manifest},
                        sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes, kind: str | None = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise SnapshotError("not a snapshot file (bad magic)")
    try:
        (hlen,) = struct.unpack("<Q", blob[8:16])
        header = json.loads(blob[16:16 + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"corrupt snapshot header: {exc}") from None
    if kind is not None and header["kind"] != kind:
        raise SnapshotError(f"expected a {kind!r} snapshot, found {header['kind']!r}")
    body = memoryview(blob)[16 + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    return header["meta"], arrays


def save(path, kind: str, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, kind: str | None = None):
    return loads(Path(path).read_bytes(), kind)
