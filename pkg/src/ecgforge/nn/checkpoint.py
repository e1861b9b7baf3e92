"""Versioned binary checkpoints.

Layout::

    b"ECGF"                      magic
    u16 little-endian            format version
    u32 little-endian            manifest length in bytes
    manifest                     UTF-8 JSON: {"architecture": ..., "entries": [{"name", "shape"}, ...]}
    float64 little-endian        every entry's values, row-major, in manifest order

Entries are a module's parameters followed by its buffers.
"""

from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ECGF"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint or a manifest that does not match the network."""


def manifest_for(module, architecture=None) -> dict:
    return {
        "architecture": architecture,
        "entries": [{"name": name, "shape": list(arr.shape)} for name, arr in module.state()],
    }


def dumps(module, architecture=None) -> bytes:
    manifest = json.dumps(manifest_for(module, architecture), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(manifest)))
    buf.write(manifest)
    for _, arr in module.state():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def parse(blob: bytes) -> tuple[dict, list[np.ndarray]]:
    """Split a checkpoint into its manifest and arrays (float64)."""
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not an ECGF checkpoint")
    if len(blob) < 10:
        raise CheckpointError("truncated header")
    version, mlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(blob[10 : 10 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    offset = 10 + mlen
    arrays = []
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated data for {entry['name']}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape))
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after data")
    return manifest, arrays


def loads(module, blob: bytes, architecture=None) -> None:
    """Restore ``module`` in place after validating the manifest against it."""
    manifest, arrays = parse(blob)
    expected = manifest_for(module, architecture)
    if architecture is not None and manifest.get("architecture") != expected["architecture"]:
        raise CheckpointError("checkpoint architecture differs from the constructed network")
    if manifest["entries"] != expected["entries"]:
        raise CheckpointError("checkpoint layer manifest differs from the constructed network")
    for (_, target), source in zip(module.state(), arrays):
        target[...] = source


def save(module, path, architecture=None) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(module, architecture))
    os.replace(tmp, path)
    return path


def load(module, path, architecture=None) -> None:
    loads(module, Path(path).read_bytes(), architecture)
