"""Manifest + blob container shared by checkpoints and embedding exports.

``<stem>.json`` holds the manifest (tensor names, shapes, dtype, byte
offsets, plus free-form metadata); ``<stem>.bin`` holds the tensors
back-to-back as little-endian float32.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "tjepa-container/1"
BLOB_DTYPE = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save(stem, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, array in tensors.items():
        data = np.ascontiguousarray(np.asarray(array), dtype=BLOB_DTYPE)
        if not np.all(np.isfinite(data)):
            raise ContainerError(f"tensor {name!r} has non-finite entries")
        raw = data.tobytes()
        entries.append(
            {"name": name, "shape": list(data.shape), "dtype": "float32", "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "byte_order": "little",
        "blob": blob_path.name,
        "tensors": entries,
        "meta": dict(meta or {}),
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path


def load(stem) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(stem)
    if not manifest_path.exists():
        raise ContainerError(f"manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ContainerError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise ContainerError(f"{blob_path}: truncated blob for {entry['name']!r}")
        array = np.frombuffer(blob[start:stop], dtype=BLOB_DTYPE).reshape(entry["shape"])
        tensors[entry["name"]] = array.copy()
    return tensors, manifest["meta"]
