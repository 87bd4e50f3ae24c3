"""Procedural feature-tensor generator for desk-scale experiments.

Normal images share smooth low-frequency base fields (one per scale), each
image adds its own weaker smooth component (so image signatures are
distinctive) plus white noise; anomalous images additionally receive a
rectangular region whose vectors are offset along a fixed random direction,
with a matching binary ground-truth mask at the scale-1 grid. The offset
magnitude is several times the per-image residual so the defect is
separable by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .local_retrieval import bilinear_resize
from .tensor_io import FeatureTensor, write_tensor

NOISE_SIGMA = 0.02
PER_IMAGE_AMPLITUDE = 0.35
DEFECT_MAGNITUDE_PER_SQRT_DIM = 1.75  # offset norm = 1.75 * sqrt(dim)


@dataclass
class SynthSpec:
    n_normal: int
    n_anomalous: int
    grid_h: int = 32
    grid_w: int = 32
    dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.n_normal < 1 or self.n_anomalous < 0:
            raise ValueError("need at least one normal image")
        if min(self.grid_h, self.grid_w) < 8 or self.dim < 2:
            raise ValueError("grid must be at least 8x8 with dim >= 2")


def _smooth_field(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    """Low-frequency random field: coarse noise upsampled bilinearly."""
    ch, cw = max(2, h // 4), max(2, w // 4)
    coarse = rng.normal(0.0, 1.0, size=(ch, cw, c))
    field = np.stack(
        [bilinear_resize(coarse[:, :, j], h, w) for j in range(c)], axis=-1
    )
    return field.astype(np.float32)


def generate_dataset(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Write tensors, masks and manifests; returns a small summary dict.

    Produces manifest.json with every entry and train_manifest.json with the
    normal entries only (model building rejects anomalous references).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    h1, w1, c = spec.grid_h, spec.grid_w, spec.dim
    h2, w2 = max(4, h1 // 2), max(4, w1 // 2)
    base = {1: _smooth_field(rng, h1, w1, c), 2: _smooth_field(rng, h2, w2, c)}
    defect_dir = rng.normal(0.0, 1.0, size=c)
    defect_dir = (defect_dir / np.linalg.norm(defect_dir)).astype(np.float32)

    entries = []
    n_total = spec.n_normal + spec.n_anomalous
    for i in range(n_total):
        anomalous = i >= spec.n_normal
        image_id = f"{'anom' if anomalous else 'norm'}_{i:04d}"
        tensors: dict[int, FeatureTensor] = {}
        for scale, (hh, ww) in ((1, (h1, w1)), (2, (h2, w2))):
            own = PER_IMAGE_AMPLITUDE * _smooth_field(rng, hh, ww, c)
            noise = rng.normal(0.0, NOISE_SIGMA, size=(hh, ww, c)).astype(np.float32)
            tensors[scale] = FeatureTensor(base[scale] + own + noise, scale_id=scale)

        mask_rel = None
        if anomalous:
            # rectangle between 12% and 40% of each grid side
            rh = int(rng.integers(max(2, h1 // 8), max(3, int(0.4 * h1))))
            rw = int(rng.integers(max(2, w1 // 8), max(3, int(0.4 * w1))))
            r0 = int(rng.integers(0, h1 - rh + 1))
            c0 = int(rng.integers(0, w1 - rw + 1))
            mask = np.zeros((h1, w1), dtype=np.float32)
            mask[r0 : r0 + rh, c0 : c0 + rw] = 1.0

            offset = (DEFECT_MAGNITUDE_PER_SQRT_DIM * np.sqrt(c) * defect_dir).astype(
                np.float32
            )
            tensors[1].data[r0 : r0 + rh, c0 : c0 + rw] += offset
            # same normalized rectangle on the coarser grid
            s_r0, s_r1 = int(np.floor(r0 * h2 / h1)), int(np.ceil((r0 + rh) * h2 / h1))
            s_c0, s_c1 = int(np.floor(c0 * w2 / w1)), int(np.ceil((c0 + rw) * w2 / w1))
            tensors[2].data[s_r0:s_r1, s_c0:s_c1] += offset

            mask_rel = f"{image_id}_mask.cprt"
            write_tensor(FeatureTensor(mask[:, :, None], scale_id=1), out / mask_rel)

        paths = {}
        for scale, t in tensors.items():
            rel = f"{image_id}_s{scale}.cprt"
            write_tensor(t, out / rel)
            paths[str(scale)] = rel
        entries.append(
            {
                "image_id": image_id,
                "tensor_paths": paths,
                "label": "anomalous" if anomalous else "normal",
                "ground_truth_mask_path": mask_rel,
            }
        )

    manifest = {"entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    train = {"entries": [e for e in entries if e["label"] == "normal"]}
    (out / "train_manifest.json").write_text(json.dumps(train, indent=2))
    return {
        "n_entries": n_total,
        "n_normal": spec.n_normal,
        "n_anomalous": spec.n_anomalous,
        "grid": [h1, w1, c],
        "manifest": str(out / "manifest.json"),
        "train_manifest": str(out / "train_manifest.json"),
    }
