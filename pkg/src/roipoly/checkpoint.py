"""RPCK checkpoint files.

Layout: ``b"RPCK"``, u32 version (1), u32 tensor count, then per tensor
u32 name length, UTF-8 name, u32 rank, rank x u32 dims and the values as
little-endian f32. Tensors are written in lexicographic name order. The run
configuration travels as the tensor ``meta.config_json`` (its UTF-8 bytes,
one per f32 element).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
import torch

__all__ = ["CheckpointError", "write_rpck", "read_rpck", "CONFIG_TENSOR"]

MAGIC = b"RPCK"
VERSION = 1
CONFIG_TENSOR = "meta.config_json"


class CheckpointError(ValueError):
    pass


def _encode_config(cfg: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(cfg, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _decode_config(arr: np.ndarray) -> dict:
    return json.loads(bytes(arr.astype(np.uint8).tolist()).decode("utf-8"))


def write_rpck(path: str | Path, tensors: Mapping[str, torch.Tensor | np.ndarray], config: dict | None = None) -> None:
    items = {k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)) for k, v in tensors.items()}
    if config is not None:
        items[CONFIG_TENSOR] = _encode_config(config)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name in sorted(items):
            arr = np.asarray(items[name], dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _take(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated RPCK file")
    return buf


def read_rpck(path: str | Path) -> tuple[dict[str, torch.Tensor], dict | None]:
    """Return (tensors, config); config is None when the file carries none."""
    out: dict[str, torch.Tensor] = {}
    config = None
    with open(path, "rb") as fh:
        if _take(fh, 4) != MAGIC:
            raise CheckpointError("not an RPCK file")
        version, count = struct.unpack("<II", _take(fh, 8))
        if version != VERSION:
            raise CheckpointError(f"unsupported RPCK version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _take(fh, 4))
            name = _take(fh, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _take(fh, 4))
            dims = struct.unpack(f"<{rank}I", _take(fh, 4 * rank))
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(_take(fh, 4 * size), dtype="<f4").reshape(dims).astype(np.float32)
            if name == CONFIG_TENSOR:
                config = _decode_config(arr)
            else:
                out[name] = torch.from_numpy(arr)
        if fh.read(1):
            raise CheckpointError("trailing bytes in RPCK file")
    return out, config
