"""Single-file checkpoint format.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the raw tensor payload. The manifest records the model
config, the payload dtype, and per-tensor name/shape/offset, with offsets
relative to the start of the payload. Tensors are stored little-endian in
the order listed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, Parameters, init_parameters

MAGIC = b"PLTCKPT1"
VERSION = 1


def save_checkpoint(path, params: Parameters, extra: dict | None = None) -> None:
    named = params.named_tensors()
    dtype = np.dtype(params.embedding.data.dtype)
    tensors = []
    offset = 0
    chunks = []
    for name, t in named.items():
        arr = np.ascontiguousarray(t.data, dtype=dtype)
        raw = arr.astype(dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "version": VERSION,
        "config": asdict(params.config),
        "dtype": dtype.name,
        "extra": extra or {},
        "tensors": tensors,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path):
    """Returns (Parameters, extra dict). Corrupt or foreign files raise
    CheckpointError."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<Q", data[8:16])
    if 16 + mlen > len(data):
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(data[16:16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}") from e
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    try:
        cfg = ModelConfig(**manifest["config"])
    except (TypeError, KeyError) as e:
        raise CheckpointError(f"bad config in manifest: {e}") from e
    dtype = np.dtype(manifest["dtype"]).newbyteorder("<")
    payload = data[16 + mlen:]

    params = init_parameters(cfg, seed=0)
    named = params.named_tensors()
    seen = set()
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in named:
            raise CheckpointError(f"unknown tensor {name!r} in checkpoint")
        t = named[name]
        if t.data.shape != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: config implies {t.data.shape}, file has {shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"truncated payload at tensor {name!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        t.data = arr.astype(dtype.newbyteorder("="), copy=True).reshape(shape)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return params, manifest.get("extra", {})
