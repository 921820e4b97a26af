"""Checkpoint files: a JSON manifest followed by raw float32 parameter blobs.

Layout::

    bytes 0..8        header length N, unsigned 64-bit little-endian
    bytes 8..8+N      UTF-8 JSON manifest (sorted keys, no whitespace)
    bytes 8+N..       concatenated little-endian float32 blobs

The manifest carries ``format``, ``version``, the detector ``config``, free
form ``extra`` metadata and a ``tensors`` list of ``{name, shape, offset,
nbytes}`` with offsets relative to the start of the blob section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .model import DetectorConfig, ToyDetector

FORMAT = "cycconf-ckpt"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: ToyDetector, path, extra: dict | None = None) -> str:
    """Write ``model`` to ``path`` atomically; returns the file's sha256."""
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        raw = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "config": model.config.to_dict(),
                "extra": extra or {}, "tensors": tensors}
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = struct.pack("<Q", len(header)) + header + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_manifest(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", head)
        try:
            manifest = json.loads(f.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError, MemoryError, OverflowError):
            raise CheckpointError(f"{path}: unreadable manifest") from None
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest is not an object")
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
    return manifest


def load_checkpoint(path):
    """Returns ``(model, manifest)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    manifest = read_manifest(path)
    (n,) = struct.unpack("<Q", data[:8])
    base = 8 + n
    model = ToyDetector(DetectorConfig.from_dict(manifest["config"]))
    state = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = data[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: blob for {entry['name']} is truncated")
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model, manifest


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
