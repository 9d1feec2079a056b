"""Checkpoint IO: a JSON manifest plus one raw little-endian float32 blob.

A checkpoint named ``model`` is the pair ``model.json`` / ``model.bin``.
The manifest lists tensor names, shapes, dtype, and byte offsets into the
blob, plus an arbitrary JSON ``meta`` section for model configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..exceptions import BadMagic, TruncatedFile, UnsupportedVersion

_VERSION = 1


def save_checkpoint(prefix, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write ``<prefix>.json`` + ``<prefix>.bin`` (names sorted, float32)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blob = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": len(blob),
        })
        blob.extend(arr.tobytes())
    manifest = {"version": _VERSION, "byte_order": "little", "tensors": entries,
                "meta": meta or {}}
    prefix.with_suffix(".bin").write_bytes(bytes(blob))
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(prefix) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back as ``(arrays, meta)``."""
    prefix = Path(prefix)
    manifest_path = prefix.with_suffix(".json")
    blob_path = prefix.with_suffix(".bin")
    if not manifest_path.exists():
        raise BadMagic(f"missing checkpoint manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != _VERSION:
        raise UnsupportedVersion(f"checkpoint version {manifest.get('version')}")
    blob = blob_path.read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = entry["offset"] + 4 * count
        if end > len(blob):
            raise TruncatedFile(f"checkpoint blob too short for tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape).copy()
    return arrays, manifest.get("meta", {})
