"""Binary checkpoint format ("NRVK"), bit-exact across save/load.

Layout, all integers little-endian:

    bytes 0..3   magic b"NRVK"
    u32          format version (currently 1)
    u32          metadata byte length, then that many bytes of UTF-8 JSON
                 holding the model config (incl. per-layer m/h/h_kv) and
                 training provenance
    tensor records until end of file, each:
        u64      name byte length, then the UTF-8 name
        u64      rank
        u64[rank] dims
        raw IEEE-754 float32 payload, little-endian, row-major

Tensor names are unique and written in the canonical weight order, so
save(load(x)) reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, Weights, expected_shapes

MAGIC = b"NRVK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, weights: Weights, provenance: dict | None = None) -> Path:
    path = Path(path)
    meta = {
        "config": weights.config.to_dict(),
        "provenance": provenance or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for name in expected_shapes(weights.config):
            arr = np.ascontiguousarray(weights[name].data, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())
    return path


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint file")
    return b


def load_checkpoint(path):
    """Returns (Weights, metadata dict). Shapes are validated against the
    embedded config, including heterogeneous per-layer dims."""
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path} is not a NRVK checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])

        tensors = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor '{name}'")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(fh, 4 * count)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)

    weights = Weights(config, tensors)
    return weights, meta
