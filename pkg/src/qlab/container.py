"""Minimal two-file tensor container: a JSON manifest plus a raw blob.

The manifest records tensor names, shapes, byte offsets and a sha256 digest of
the blob; payloads are little-endian float32. The format is deliberately tiny
and bit-exact; converters from checkpoint ecosystems are an extension point.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import CorruptionError, ParseError

MANIFEST_VERSION = 1


def _blob_path(manifest_path: str, blob_name: str) -> str:
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), blob_name)


def save_container(manifest_path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors to <manifest_path> (JSON) and a sibling .bin blob."""
    base = os.path.basename(manifest_path)
    stem = base[:-5] if base.endswith(".json") else base
    blob_name = stem + ".bin"
    entries = []
    parts = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = data.tobytes()
        entries.append({
            "name": name,
            "shape": list(data.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
        })
        parts.append(raw)
        offset += len(raw)
    blob = b"".join(parts)
    manifest = {
        "version": MANIFEST_VERSION,
        "blob": blob_name,
        "digest": "sha256:" + hashlib.sha256(blob).hexdigest(),
        "tensors": entries,
    }
    with open(_blob_path(manifest_path, blob_name), "wb") as f:
        f.write(blob)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_container(manifest_path: str) -> dict[str, np.ndarray]:
    """Read a container back; verifies the blob digest and the layout."""
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read manifest {manifest_path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise ParseError(f"unsupported container version {manifest.get('version')}")
    if "digest" not in manifest:
        raise ParseError("manifest has no digest")
    with open(_blob_path(manifest_path, manifest["blob"]), "rb") as f:
        blob = f.read()
    digest = "sha256:" + hashlib.sha256(blob).hexdigest()
    if digest != manifest["digest"]:
        raise CorruptionError(f"blob digest mismatch ({digest} != {manifest['digest']})")
    out: dict[str, np.ndarray] = {}
    last_end = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        shape = tuple(int(s) for s in entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        expected = int(np.prod(shape)) * 4 if shape else 4
        if nbytes != expected:
            raise ParseError(f"tensor {name}: nbytes {nbytes} != shape size {expected}")
        if offset < last_end or offset + nbytes > len(blob):
            raise ParseError(f"tensor {name}: overlapping or out-of-range payload")
        last_end = offset + nbytes
        out[name] = np.frombuffer(blob, dtype="<f4", count=expected // 4,
                                  offset=offset).reshape(shape).copy()
    return out
