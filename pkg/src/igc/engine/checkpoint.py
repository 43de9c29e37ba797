"""Parameter archives.

Layout of a checkpoint file::

    bytes 0..7    magic  b"IGCCKPT1"
    bytes 8..15   uint64 little-endian length N of the manifest
    next N bytes  UTF-8 JSON manifest
    remainder     float64 little-endian values, arrays back to back

The manifest is ``{"format": 1, "dtype": "<f8", "meta": {...},
"arrays": [{"name", "shape", "offset", "count"}, ...]}`` where ``offset``
and ``count`` are in elements from the start of the value section.
"""
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"IGCCKPT1"


def save_checkpoint(path, arrays, meta=None):
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        blobs.append(np.ascontiguousarray(data).tobytes())
        offset += data.size
    manifest = json.dumps({"format": 1, "dtype": "<f8", "meta": meta or {}, "arrays": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(arrays, meta)`` with arrays as a name -> ndarray dict."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode())
    values = np.frombuffer(raw, dtype="<f8", offset=16 + n)
    arrays = {}
    for e in manifest["arrays"]:
        chunk = values[e["offset"]:e["offset"] + e["count"]]
        arrays[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return arrays, manifest.get("meta", {})
