"""Feature tensor data model, binary tensor file format and dataset manifests.

A feature tensor is an H x W x C grid of per-patch float32 vectors at one
scale. Tensors are exchanged through CPRT files, a fixed little-endian
binary layout:

    bytes 0-3    magic ASCII "CPRT"
    bytes 4-7    version, u32 LE, currently 1
    byte  8      dtype code, u8, 0 = float32 LE (other codes reserved)
    byte  9      ndim, u8, always 3
    bytes 10-21  three u32 LE dims (H, W, C)
    byte  22     scale_id, u8
    bytes 23-24  reserved, zero
    payload      H*W*C float32 LE values, row-major (row, col, channel)

Files are immutable after write; readers may be shared freely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, TensorFormatError

MAGIC = b"CPRT"
VERSION = 1
DTYPE_FLOAT32 = 0
HEADER_SIZE = 25
HEADER_STRUCT = struct.Struct("<4sIBBIIIBH")

VALID_LABELS = ("normal", "anomalous", "unknown")


@dataclass
class FeatureTensor:
    """Grid of per-patch feature vectors at one scale.

    data has shape (height, width, channels), float32, all finite.
    """

    data: np.ndarray
    scale_id: int = 1

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"tensor data must be 3-D, got ndim={self.data.ndim}")
        if min(self.data.shape) < 1:
            raise ValueError(f"tensor dims must be positive, got {self.data.shape}")
        if not (0 <= int(self.scale_id) <= 255):
            raise ValueError(f"scale_id must fit in a byte, got {self.scale_id}")
        if not np.isfinite(self.data).all():
            raise ValueError("tensor data contains NaN or Inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def vectors(self) -> np.ndarray:
        """Flattened (H*W, C) view of the patch vectors."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass
class PatchCoordinate:
    row: int
    col: int


def write_tensor(t: FeatureTensor, path: str | Path) -> None:
    """Write a tensor as a CPRT file; read_tensor reproduces it bit-exactly."""
    h, w, c = t.shape
    header = HEADER_STRUCT.pack(MAGIC, VERSION, DTYPE_FLOAT32, 3, h, w, c, t.scale_id, 0)
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload)
    except OSError as e:
        raise TensorFormatError(f"cannot write tensor file {path}: {e}") from e


def _parse_header(raw: bytes, path) -> tuple[int, int, int, int]:
    if len(raw) < HEADER_SIZE:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, ndim, h, w, c, scale_id, reserved = HEADER_STRUCT.unpack(
        raw[:HEADER_SIZE]
    )
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    if ndim != 3:
        raise TensorFormatError(f"{path}: unsupported ndim {ndim}")
    if reserved != 0:
        raise TensorFormatError(f"{path}: reserved bytes not zero")
    if min(h, w, c) < 1:
        raise TensorFormatError(f"{path}: non-positive dims ({h}, {w}, {c})")
    return h, w, c, scale_id


def read_tensor(path: str | Path) -> FeatureTensor:
    """Read a CPRT file, validating format and payload."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise TensorFormatError(f"cannot read tensor file {path}: {e}") from e
    h, w, c, scale_id = _parse_header(raw, path)
    expected = HEADER_SIZE + 4 * h * w * c
    if len(raw) != expected:
        raise TensorFormatError(
            f"{path}: truncated or oversized payload ({len(raw)} bytes, expected {expected})"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(h, w, c)
    if not np.isfinite(data).all():
        raise TensorFormatError(f"{path}: payload contains NaN or Inf")
    return FeatureTensor(data=data.copy(), scale_id=scale_id)


def read_tensor_header(path: str | Path) -> tuple[int, int, int, int]:
    """Read only (H, W, C, scale_id) from a CPRT file."""
    try:
        with open(path, "rb") as f:
            raw = f.read(HEADER_SIZE)
    except OSError as e:
        raise TensorFormatError(f"cannot read tensor file {path}: {e}") from e
    return _parse_header(raw, path)


@dataclass
class ManifestEntry:
    image_id: str
    tensor_paths: dict[int, Path]
    label: str = "normal"
    ground_truth_mask_path: Path | None = None


@dataclass
class DatasetManifest:
    """Validated list of dataset entries with consistent per-scale shapes."""

    entries: list[ManifestEntry]
    shapes: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def scales(self) -> list[int]:
        return sorted(self.shapes)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a JSON dataset manifest.

    Relative tensor/mask paths are resolved against the manifest's directory.
    Every tensor file must exist, image ids must be unique, and all entries
    must share identical per-scale (H, W, C).
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e}") from e

    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError(f"manifest {path}: empty dataset")

    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    shapes: dict[int, tuple[int, int, int]] = {}
    for i, raw in enumerate(raw_entries):
        image_id = raw.get("image_id")
        if not image_id or not isinstance(image_id, str):
            raise ManifestError(f"manifest {path}: entry {i} missing image_id")
        if image_id in seen:
            raise ManifestError(f"manifest {path}: duplicate image_id {image_id!r}")
        seen.add(image_id)

        label = raw.get("label", "normal")
        if label not in VALID_LABELS:
            raise ManifestError(f"manifest {path}: entry {image_id!r} has bad label {label!r}")

        raw_paths = raw.get("tensor_paths")
        if not isinstance(raw_paths, dict) or not raw_paths:
            raise ManifestError(f"manifest {path}: entry {image_id!r} has no tensor_paths")
        tensor_paths: dict[int, Path] = {}
        for scale_key, rel in sorted(raw_paths.items(), key=lambda kv: str(kv[0])):
            try:
                scale = int(scale_key)
            except (TypeError, ValueError):
                raise ManifestError(
                    f"manifest {path}: entry {image_id!r} has non-integer scale {scale_key!r}"
                ) from None
            tpath = (base / rel).resolve()
            if not tpath.is_file():
                raise ManifestError(f"manifest {path}: missing tensor file {tpath}")
            h, w, c, _ = read_tensor_header(tpath)
            if scale in shapes and shapes[scale] != (h, w, c):
                raise ManifestError(
                    f"manifest {path}: entry {image_id!r} scale {scale} shape "
                    f"({h}, {w}, {c}) != {shapes[scale]}"
                )
            shapes.setdefault(scale, (h, w, c))
            tensor_paths[scale] = tpath

        mask_path = None
        if raw.get("ground_truth_mask_path"):
            mask_path = (base / raw["ground_truth_mask_path"]).resolve()
            if not mask_path.is_file():
                raise ManifestError(f"manifest {path}: missing mask file {mask_path}")

        entries.append(ManifestEntry(image_id, tensor_paths, label, mask_path))

    scale_sets = {tuple(sorted(e.tensor_paths)) for e in entries}
    if len(scale_sets) != 1:
        raise ManifestError(f"manifest {path}: entries do not share the same scale set")

    return DatasetManifest(entries=entries, shapes=shapes)
