"""End-to-end orchestration: model building, bundle persistence and per-query

inference producing an anomaly map plus an image-level score.

Inference runs the two-stage cascade: the query signature selects the top-K
reference images, window-constrained patch retrieval over those references
produces per-scale maps, the maps are aggregated to the scale-1 grid, and
(optionally) multiplied by the fused foreground confidence. The image score
is the sum of the T largest map values.
"""

from __future__ import annotations

import io
import json
import time
import warnings
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_io
from .codebook import Codebook, assign_codes, kmeans_fit
from .errors import DegenerateLabelsError, ModelBundleError
from .foreground import (
    LinearForegroundModel,
    RegionSpec,
    apply_foreground,
    fuse_foreground,
    predict_foreground,
    pseudo_labels,
    train_foreground,
)
from .global_retrieval import GlobalIndex, NeighborList, compute_signature, top_k
from .local_retrieval import AnomalyMap, LocalFeatureBank, RetrievalWindow, local_nn, aggregate_scales
from .tensor_io import DatasetManifest, FeatureTensor

BUNDLE_MAGIC = b"CPRM"
BUNDLE_VERSION = 1
CODEBOOK_POOL_CAP = 200_000

# Documented operating points: the engine takes feature dimensionality from
# the provided tensors; these names only record the expected local dims.
OPERATING_POINTS = {"standard": 384, "fast": 64, "faster": 16}


@dataclass
class CprConfig:
    """Engine configuration with the standard defaults."""

    k_neighbors: int = 10
    grid_s: int = 5
    n_clusters: int = 12
    tau: int = 5
    top_t: int = 512
    windows: dict[int, int] = field(default_factory=lambda: {1: 3, 2: 1})
    feb_enabled: bool = True
    kl_eps: float = 1e-8
    seed: int = 0
    border_frac: float = 0.125
    center_frac: float = 0.5

    def __post_init__(self):
        self.windows = {int(k): int(v) for k, v in self.windows.items()}
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.tau >= self.grid_s * self.grid_s:
            raise ValueError("tau must be < grid_s^2")
        if self.top_t < 1:
            raise ValueError("top_t must be >= 1")
        for scale, w in self.windows.items():
            RetrievalWindow(w)  # validates odd/positive

    def to_dict(self) -> dict:
        return {
            "k_neighbors": self.k_neighbors,
            "grid_s": self.grid_s,
            "n_clusters": self.n_clusters,
            "tau": self.tau,
            "top_t": self.top_t,
            "windows": {str(k): v for k, v in sorted(self.windows.items())},
            "feb_enabled": self.feb_enabled,
            "kl_eps": self.kl_eps,
            "seed": self.seed,
            "border_frac": self.border_frac,
            "center_frac": self.center_frac,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CprConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class CprModel:
    """Immutable reference model: codebook, signatures, banks, foreground."""

    config: CprConfig
    codebook: Codebook
    global_index: GlobalIndex
    banks: dict[int, LocalFeatureBank]
    feb: tuple[LinearForegroundModel, np.ndarray] | None = None
    # feb[1] holds the stacked reference foreground maps, (N, H_F, W_F)

    def __post_init__(self):
        n = len(self.global_index)
        for scale, bank in self.banks.items():
            if bank.n_references != n:
                raise ValueError(
                    f"bank {scale} holds {bank.n_references} tensors, index has {n}"
                )
        if self.feb is not None and self.feb[1].shape[0] != n:
            raise ValueError("foreground map count differs from index size")

    @property
    def scales(self) -> list[int]:
        return sorted(self.banks)

    @property
    def n_references(self) -> int:
        return len(self.global_index)


@dataclass
class DetectionResult:
    """Final anomaly map, image score and retrieval diagnostics."""

    anomaly_map: AnomalyMap
    image_score: float
    neighbors: NeighborList
    per_scale_maps: dict[int, AnomalyMap] = field(default_factory=dict)

    @property
    def neighbor_ids(self) -> list[int]:
        return [int(i) for i in self.neighbors.indices]


def image_score(amap: AnomalyMap, t: int) -> float:
    """Sum of the min(t, H*W) largest map values."""
    if t < 1:
        raise ValueError("t must be >= 1")
    flat = amap.values.ravel()
    t = min(int(t), flat.size)
    top = np.partition(flat, flat.size - t)[flat.size - t :]
    return float(top.astype(np.float64).sum())


def build_model(manifest: DatasetManifest, config: CprConfig) -> CprModel:
    """Fit codebook, signatures, banks and the optional foreground branch.

    All manifest entries must be labeled normal. Deterministic for a fixed
    seed: rebuilding yields a byte-identical persisted bundle.
    """
    bad = [e.image_id for e in manifest.entries if e.label != "normal"]
    if bad:
        raise ValueError(f"reference manifest must be normal-only, got {bad}")
    scales = manifest.scales
    if 1 not in scales:
        raise ValueError("scale 1 tensors are required")

    tensors: dict[int, list[FeatureTensor]] = {s: [] for s in scales}
    for entry in manifest.entries:
        for s in scales:
            tensors[s].append(tensor_io.read_tensor(entry.tensor_paths[s]))

    pool = np.concatenate([t.vectors() for t in tensors[1]])
    if pool.shape[0] > CODEBOOK_POOL_CAP:
        rng = np.random.default_rng(config.seed)
        picks = rng.choice(pool.shape[0], size=CODEBOOK_POOL_CAP, replace=False)
        pool = pool[np.sort(picks)]
    cb = kmeans_fit(pool, config.n_clusters, config.seed)

    grids = np.stack(
        [compute_signature(t, cb, config.grid_s).grid for t in tensors[1]]
    )
    index = GlobalIndex(image_ids=[e.image_id for e in manifest.entries], grids=grids)

    banks = {
        s: LocalFeatureBank.from_tensors(tensors[s], scale_id=s, normalize=True)
        for s in scales
    }

    feb = None
    feb_warning = None
    if config.feb_enabled:
        region = RegionSpec(config.border_frac, config.center_frac)
        label_sets = [
            pseudo_labels(assign_codes(t, cb), region, config.n_clusters, e.image_id)
            for t, e in zip(tensors[1], manifest.entries)
        ]
        try:
            model = train_foreground(tensors[1], label_sets)
            maps = np.stack([predict_foreground(t, model) for t in tensors[1]])
            feb = (model, maps)
        except DegenerateLabelsError as e:
            feb_warning = str(e)

    if feb_warning:
        warnings.warn(f"foreground branch disabled: {feb_warning}")
        config = replace(config, feb_enabled=False)
    return CprModel(config=config, codebook=cb, global_index=index, banks=banks, feb=feb)


def infer(
    model: CprModel,
    query_tensors: dict[int, FeatureTensor],
    timings: dict | None = None,
) -> DetectionResult:
    """Run the retrieval cascade for one query; pure and thread-safe."""
    query_tensors = {int(k): v for k, v in query_tensors.items()}
    for s in model.scales:
        if s not in query_tensors:
            raise ValueError(f"query is missing scale {s}")
    for s in query_tensors:
        if s not in model.banks:
            raise ValueError(f"model has no bank for query scale {s}")
        if query_tensors[s].shape != model.banks[s].grid_shape:
            raise ValueError(
                f"query scale {s} shape {query_tensors[s].shape} != "
                f"bank shape {model.banks[s].grid_shape}"
            )

    cfg = model.config
    t0 = time.perf_counter()
    sig = compute_signature(query_tensors[1], model.codebook, cfg.grid_s)
    neighbors = top_k(model.global_index, sig, cfg.k_neighbors, cfg.tau, cfg.kl_eps)
    t1 = time.perf_counter()

    per_scale: dict[int, AnomalyMap] = {}
    scale_times: dict[int, float] = {}
    for s in model.scales:
        ts = time.perf_counter()
        window = RetrievalWindow(cfg.windows.get(s, 1))
        per_scale[s] = local_nn(query_tensors[s], model.banks[s], neighbors.indices, window)
        scale_times[s] = time.perf_counter() - ts

    t2 = time.perf_counter()
    out_h, out_w = model.banks[1].grid_shape[:2]
    a_mul = aggregate_scales([per_scale[s] for s in model.scales], out_h, out_w)

    if model.feb is not None:
        feb_model, ref_maps = model.feb
        f_tst = predict_foreground(query_tensors[1], feb_model)
        f_star = fuse_foreground(f_tst, [ref_maps[i] for i in neighbors.indices])
        final = apply_foreground(a_mul, f_star)
    else:
        final = a_mul
    score = image_score(final, cfg.top_t)
    t3 = time.perf_counter()

    if timings is not None:
        timings["global_retrieval"] = t1 - t0
        for s, dt in scale_times.items():
            timings[f"local_retrieval.{s}"] = dt
        timings["fusion"] = t3 - t2
        timings["total"] = t3 - t0
    return DetectionResult(
        anomaly_map=final,
        image_score=score,
        neighbors=neighbors,
        per_scale_maps=per_scale,
    )


def remove_reference(model: CprModel, index: int) -> CprModel:
    """Drop one reference from every aligned store without refitting."""
    n = model.n_references
    if not 0 <= index < n:
        raise ValueError(f"reference index {index} out of range")
    if n == 1:
        raise ValueError("cannot remove the last reference")
    keep = [i for i in range(n) if i != index]
    new_index = GlobalIndex(
        image_ids=[model.global_index.image_ids[i] for i in keep],
        grids=model.global_index.grids[keep],
    )
    new_banks = {
        s: LocalFeatureBank(
            scale_id=b.scale_id,
            stack=b.stack[keep],
            normalized=b.normalized,
            has_zero_vectors=b.has_zero_vectors,
        )
        for s, b in model.banks.items()
    }
    new_feb = None
    if model.feb is not None:
        new_feb = (model.feb[0], model.feb[1][keep])
    return CprModel(
        config=model.config,
        codebook=model.codebook,
        global_index=new_index,
        banks=new_banks,
        feb=new_feb,
    )


# ---------------------------------------------------------------------------
# bundle persistence
#
# layout: "CPRM" | u32 version | u32 len + config JSON | u32 section count |
#         sections (u16 name len | name utf-8 | u32 payload len | payload) |
#         u32 CRC32 over all preceding bytes.
# Sections hold either a tensor block in the tensor file format or JSON.
# ---------------------------------------------------------------------------


def _tensor_block(data: np.ndarray, scale_id: int = 0) -> bytes:
    buf = io.BytesIO()
    t = FeatureTensor(data=np.ascontiguousarray(data, dtype=np.float32), scale_id=scale_id)
    h, w, c = t.shape
    buf.write(
        tensor_io.HEADER_STRUCT.pack(
            tensor_io.MAGIC, tensor_io.VERSION, tensor_io.DTYPE_FLOAT32, 3, h, w, c, scale_id, 0
        )
    )
    buf.write(t.data.astype("<f4").tobytes())
    return buf.getvalue()


def _parse_tensor_block(raw: bytes, name: str) -> tuple[np.ndarray, int]:
    h, w, c, scale_id = tensor_io._parse_header(raw, f"section {name}")
    expected = tensor_io.HEADER_SIZE + 4 * h * w * c
    if len(raw) != expected:
        raise ModelBundleError(f"section {name}: bad tensor payload length")
    data = np.frombuffer(raw, dtype="<f4", offset=tensor_io.HEADER_SIZE).reshape(h, w, c)
    return data.copy(), scale_id


def _json_bytes(doc) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_model(model: CprModel, path) -> None:
    """Write the model as a single checksummed bundle file."""
    header_doc = {
        "config": model.config.to_dict(),
        "image_ids": model.global_index.image_ids,
        "scales": model.scales,
        "bank_meta": {
            str(s): {
                "shape": list(model.banks[s].grid_shape),
                "normalized": model.banks[s].normalized,
                "has_zero_vectors": model.banks[s].has_zero_vectors,
            }
            for s in model.scales
        },
        "codebook_seed": model.codebook.rng_seed,
        "has_feb": model.feb is not None,
    }

    sections: list[tuple[str, bytes]] = []
    sections.append(("codebook", _tensor_block(model.codebook.centers[:, None, :])))
    sections.append((
        "signatures",
        _json_bytes({"grids": model.global_index.grids.astype(float).tolist()}),
    ))
    for s in model.scales:
        bank = model.banks[s]
        n, h, w, c = bank.stack.shape
        folded = bank.stack.reshape(n * h, w, c)
        sections.append((f"bank.{s}", _tensor_block(folded, scale_id=s)))
    if model.feb is not None:
        feb_model, ref_maps = model.feb
        sections.append((
            "feb",
            _json_bytes({
                "weights": feb_model.weights.tolist(),
                "bias": float(feb_model.bias),
                "maps": ref_maps.astype(float).tolist(),
            }),
        ))

    body = io.BytesIO()
    body.write(BUNDLE_MAGIC)
    body.write(np.uint32(BUNDLE_VERSION).tobytes())
    config_bytes = _json_bytes(header_doc)
    body.write(np.uint32(len(config_bytes)).tobytes())
    body.write(config_bytes)
    body.write(np.uint32(len(sections)).tobytes())
    for name, payload in sections:
        name_b = name.encode()
        body.write(np.uint16(len(name_b)).tobytes())
        body.write(name_b)
        body.write(np.uint32(len(payload)).tobytes())
        body.write(payload)
    blob = body.getvalue()
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(blob)
        f.write(np.uint32(crc).tobytes())


def load_model(path) -> CprModel:
    """Read a bundle, verifying checksum, version and section contents."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ModelBundleError(f"{path}: file too small")
    blob, crc_raw = raw[:-4], raw[-4:]
    if zlib.crc32(blob) & 0xFFFFFFFF != int(np.frombuffer(crc_raw, dtype="<u4")[0]):
        raise ModelBundleError(f"{path}: checksum mismatch (corrupt bundle)")
    if blob[:4] != BUNDLE_MAGIC:
        raise ModelBundleError(f"{path}: bad magic {blob[:4]!r}")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version > BUNDLE_VERSION:
        raise ModelBundleError(f"{path}: unsupported bundle version {version}")

    pos = 8
    (config_len,) = np.frombuffer(blob[pos : pos + 4], dtype="<u4")
    pos += 4
    header_doc = json.loads(blob[pos : pos + int(config_len)].decode())
    pos += int(config_len)
    (n_sections,) = np.frombuffer(blob[pos : pos + 4], dtype="<u4")
    pos += 4

    sections: dict[str, bytes] = {}
    for _ in range(int(n_sections)):
        (name_len,) = np.frombuffer(blob[pos : pos + 2], dtype="<u2")
        pos += 2
        name = blob[pos : pos + int(name_len)].decode()
        pos += int(name_len)
        (payload_len,) = np.frombuffer(blob[pos : pos + 4], dtype="<u4")
        pos += 4
        sections[name] = blob[pos : pos + int(payload_len)]
        pos += int(payload_len)
    if pos != len(blob):
        raise ModelBundleError(f"{path}: trailing bytes after sections")

    config = CprConfig.from_dict(header_doc["config"])
    centers, _ = _parse_tensor_block(sections["codebook"], "codebook")
    cb = Codebook(centers=centers[:, 0, :], rng_seed=int(header_doc["codebook_seed"]))

    grids = np.asarray(json.loads(sections["signatures"].decode())["grids"], dtype=np.float32)
    index = GlobalIndex(image_ids=list(header_doc["image_ids"]), grids=grids)

    banks: dict[int, LocalFeatureBank] = {}
    n = len(index)
    for s in header_doc["scales"]:
        meta = header_doc["bank_meta"][str(s)]
        folded, scale_id = _parse_tensor_block(sections[f"bank.{s}"], f"bank.{s}")
        h, w, c = meta["shape"]
        banks[int(s)] = LocalFeatureBank(
            scale_id=int(s),
            stack=folded.reshape(n, h, w, c),
            normalized=bool(meta["normalized"]),
            has_zero_vectors=bool(meta["has_zero_vectors"]),
        )

    feb = None
    if header_doc["has_feb"]:
        doc = json.loads(sections["feb"].decode())
        feb_model = LinearForegroundModel(
            weights=np.asarray(doc["weights"], dtype=np.float64), bias=float(doc["bias"])
        )
        feb = (feb_model, np.asarray(doc["maps"], dtype=np.float32))

    return CprModel(config=config, codebook=cb, global_index=index, banks=banks, feb=feb)
