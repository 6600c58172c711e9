"""Flat little-endian float32 weight blobs with a JSON manifest.

A checkpoint directory holds ``weights.bin`` (all tensors back to back, row-major)
and ``manifest.json`` listing ``name``, ``shape``, ``dtype``, ``offset`` and a
sha256 ``checksum`` per tensor plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

BLOB_DTYPE = np.dtype("<f4")
BLOB_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"


class ChecksumError(IOError):
    pass


def save_weights(directory, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / BLOB_FILE, "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name]), dtype=BLOB_DTYPE)
            raw = arr.tobytes(order="C")
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le", "offset": offset,
                            "nbytes": len(raw), "checksum": hashlib.sha256(raw).hexdigest()})
            offset += len(raw)
    manifest = {"format": "afca-lab-weights/1", "tensors": entries, "metadata": metadata or {}}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_weights(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    blob = (directory / BLOB_FILE).read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or hashlib.sha256(raw).hexdigest() != entry["checksum"]:
            raise ChecksumError(f"checksum mismatch for tensor {entry['name']!r} in {directory}")
        out[entry["name"]] = np.frombuffer(raw, dtype=BLOB_DTYPE).reshape(entry["shape"]).copy()
    return out, manifest.get("metadata", {})
