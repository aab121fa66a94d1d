"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DMDT"                      magic
    u32   version
    u64   header length in bytes
    ...   UTF-8 JSON header: {"config": {...}, "tensors": [{"name", "shape", "offset"}, ...]}
    ...   float32 payload, tensors back to back, offsets in elements
    u64   checksum: first 8 bytes of BLAKE2b over the payload
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .config import RunConfig
from .errors import CorruptCheckpointError

MAGIC = b"DMDT"
VERSION = 1


def _checksum(payload):
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def save(path, model, config: RunConfig, extra=None):
    manifest = []
    chunks = []
    offset = 0
    for name, t in model.named_tensors():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    payload = b"".join(chunks)
    header = json.dumps(
        {"config": config.to_dict(), "tensors": manifest, "extra": extra or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<Q", _checksum(payload)))


def read(path):
    """Return (config, {name: float32 array}, extra) after verifying the checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 24 or blob[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    start = 16 + hlen
    if len(blob) < start + 8:
        raise CorruptCheckpointError(f"{path}: truncated")
    try:
        header = json.loads(blob[16:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header") from exc
    payload = blob[start:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if stored != _checksum(payload):
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        o = entry["offset"]
        tensors[entry["name"]] = flat[o:o + n].reshape(entry["shape"]).astype(np.float32)
    return RunConfig.from_dict(header["config"]), tensors, header.get("extra", {})


def load(path):
    """Rebuild the model stored at ``path``; returns (model, config, extra)."""
    from .model import GroundingModel

    config, tensors, extra = read(path)
    model = GroundingModel(config.model, seed=config.train.seed)
    model.load_state_dict(tensors)
    model.eval()
    return model, config, extra


def round_to_f32(model):
    """Snap every tensor to the nearest float32 value (what a checkpoint stores)."""
    for _, t in model.named_tensors():
        t.data = t.data.astype(np.float32).astype(t.dtype)
    return model
