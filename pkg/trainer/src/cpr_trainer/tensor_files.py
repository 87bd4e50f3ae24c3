"""Binary tensor export in the engine's on-disk format, plus manifest output.

Layout (little-endian): magic "CPRT", u32 version 1, u8 dtype code 0
(float32), u8 ndim 3, three u32 dims (H, W, C), u8 scale id, two reserved
zero bytes, then the row-major float32 payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<4sIBBIIIBH")
MAGIC = b"CPRT"
VERSION = 1


def write_tensor(data: np.ndarray, scale_id: int, path: str | Path) -> None:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != 3:
        raise ValueError(f"tensor must be 3-D (H, W, C), got {data.shape}")
    if not np.isfinite(data).all():
        raise ValueError("tensor contains NaN or Inf")
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, 0, 3, h, w, c, scale_id, 0))
        f.write(data.astype("<f4").tobytes())


def read_tensor(path: str | Path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    magic, version, dtype, ndim, h, w, c, scale_id, reserved = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != MAGIC or version != VERSION or dtype != 0 or ndim != 3 or reserved:
        raise ValueError(f"{path}: not a supported tensor file")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return data.copy(), scale_id


def write_manifest(entries: list[dict], path: str | Path) -> None:
    Path(path).write_text(json.dumps({"entries": entries}, indent=2))
