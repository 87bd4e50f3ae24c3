"""Metric training loop: retrieval-neighborhood sampling, synthetic defects,

weighted contrastive loss, and projected-tensor export for the engine.

The engine is driven only through its public surfaces: raw features are
written as tensor files plus a manifest, the `cpr` CLI builds a model and
reports each training image's retrieval neighbors, and the trained
projections are exported back as tensor files the engine loads directly.
"""

from __future__ import annotations

import json
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .backbone import TwoScaleBackbone, build_backbone, extract_features
from .config import TrainerConfig
from .defects import downsample_mask, synth_anomaly
from .loss import contrastive_loss
from .lrb import MultiScaleProjection
from .sampling import apply_weights, sample_pairs
from .tensor_files import write_manifest, write_tensor

DELTA_DRAWS = 10_000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingResult:
    checkpoint_path: Path
    export_dir: Path
    export_manifest: Path
    log_path: Path
    loss_curve: list[float] = field(default_factory=list)
    delta: dict[int, float] = field(default_factory=dict)


def load_images(source) -> tuple[list[str], list[np.ndarray]]:
    """Accept a directory or an explicit list of image paths."""
    if isinstance(source, (str, Path)) and Path(source).is_dir():
        paths = sorted(
            p for p in Path(source).iterdir()
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
        )
    else:
        paths = [Path(p) for p in source]
    if not paths:
        raise ValueError("no training images found")
    images = [np.asarray(Image.open(p).convert("RGB")) for p in paths]
    return [p.stem for p in paths], images


def export_raw_features(
    ids: list[str],
    images: list[np.ndarray],
    backbone: TwoScaleBackbone,
    out_dir: Path,
) -> tuple[Path, dict[str, dict[int, np.ndarray]]]:
    """Write per-image raw tensors + manifest; returns (manifest path, cache)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cache: dict[str, dict[int, np.ndarray]] = {}
    entries = []
    for image_id, image in zip(ids, images):
        feats = extract_features(image, backbone)
        cache[image_id] = feats
        paths = {}
        for scale, grid in feats.items():
            rel = f"{image_id}_s{scale}.cprt"
            write_tensor(grid, scale, out_dir / rel)
            paths[str(scale)] = rel
        entries.append({"image_id": image_id, "tensor_paths": paths, "label": "normal"})
    manifest = out_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest, cache


def _run_engine(args: list[str]) -> str:
    cmd = [sys.executable, "-m", "cpr.cli", *args]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"engine command failed ({proc.returncode}): {' '.join(args)}\n{proc.stderr}"
        )
    return proc.stdout


def retrieval_neighbors(manifest: Path, workdir: Path, seed: int) -> dict[str, list[str]]:
    """Each training image's engine-retrieved neighbor ids, self excluded."""
    model_path = workdir / "knn_model.cprm"
    _run_engine(
        [
            "build", "--manifest", str(manifest), "--out", str(model_path),
            "--no-feb", "--seed", str(seed),
        ]
    )
    knn_dir = workdir / "knn"
    _run_engine(
        ["infer", "--model", str(model_path), "--query", str(manifest), "--out", str(knn_dir)]
    )
    neighbors: dict[str, list[str]] = {}
    with open(knn_dir / "index.jsonl") as f:
        for line in f:
            doc = json.loads(line)
            neighbors[doc["image_id"]] = [
                n for n in doc["neighbor_image_ids"] if n != doc["image_id"]
            ]
    return neighbors


def estimate_delta(
    cache: dict[str, dict[int, np.ndarray]], rng: np.random.Generator
) -> dict[int, float]:
    """Mean raw-feature distance over random (query, reference, coordinate)

    draws, per scale."""
    ids = sorted(cache)
    scales = sorted(cache[ids[0]])
    out: dict[int, float] = {}
    for scale in scales:
        h, w, _ = cache[ids[0]][scale].shape
        total = 0.0
        for _ in range(DELTA_DRAWS):
            a, b = rng.choice(len(ids), size=2, replace=False)
            r = int(rng.integers(h))
            c = int(rng.integers(w))
            va = cache[ids[a]][scale][r, c].astype(np.float64)
            vb = cache[ids[b]][scale][r, c].astype(np.float64)
            total += float(np.linalg.norm(va - vb))
        out[scale] = total / DELTA_DRAWS
        if out[scale] <= 0:
            out[scale] = 1.0
    return out


def _defect_with_valid_masks(
    image: np.ndarray,
    grid_shapes: dict[int, tuple[int, int]],
    cell_threshold: float,
    rng: np.random.Generator,
    max_tries: int = 50,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Sample a defect whose downsampled mask has both classes at every scale."""
    for _ in range(max_tries):
        augmented, pixel_mask = synth_anomaly(image, rng)
        masks = {
            s: downsample_mask(pixel_mask, h, w, cell_threshold)
            for s, (h, w) in grid_shapes.items()
        }
        if all(m.any() and not m.all() for m in masks.values()):
            return augmented, masks
    raise RuntimeError("could not sample a defect valid at every scale")


def train_lrb(images_source, config: TrainerConfig, out_dir) -> TrainingResult:
    """Full training run: extract, retrieve neighborhoods, train, export."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    workdir = out_dir / "work"
    workdir.mkdir(exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    ids, images = load_images(images_source)
    if len(ids) < 2:
        raise ValueError("training needs at least two images")
    backbone = build_backbone(config.backbone)
    raw_manifest, cache = export_raw_features(ids, images, backbone, workdir / "raw")
    neighbors = retrieval_neighbors(raw_manifest, workdir, config.seed)

    delta = (
        {s: config.delta for s in sorted(cache[ids[0]])}
        if config.delta is not None
        else estimate_delta(cache, rng)
    )
    grid_shapes = {s: g.shape[:2] for s, g in cache[ids[0]].items()}
    in_channels = {s: g.shape[2] for s, g in cache[ids[0]].items()}

    model = MultiScaleProjection(in_channels, config.out_dim)
    model.train()
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    raw_torch = {
        image_id: {s: torch.from_numpy(g) for s, g in feats.items()}
        for image_id, feats in cache.items()
    }

    # round-robin query schedule: every pass over the (shuffled) image list is
    # one epoch, the reference for a query is drawn from its retrieval
    # neighborhood once per run, and each image's synthetic defect is re-rolled
    # every defect_refresh_epochs. Consecutive epochs therefore measure the
    # same data distribution, which keeps the loss curve comparable over time.
    order = rng.permutation(len(ids))
    ref_for: dict[str, str] = {}
    for image_id in ids:
        cand = neighbors.get(image_id) or [i for i in ids if i != image_id]
        ref_for[image_id] = cand[int(rng.integers(len(cand)))]

    loss_curve: list[float] = []
    for step in range(config.iterations):
        optimizer.zero_grad()
        batch_loss = torch.zeros(())
        for b in range(config.batch_size):
            ticket = step * config.batch_size + b
            q_pos = int(order[ticket % len(ids)])
            epoch = ticket // len(ids)
            q_id = ids[q_pos]
            r_id = ref_for[q_id]

            defect_rng = np.random.default_rng(
                (config.seed, q_pos, epoch // config.defect_refresh_epochs)
            )
            augmented, masks = _defect_with_valid_masks(
                images[q_pos], grid_shapes, config.mask_cell_threshold, defect_rng
            )
            aug_feats = extract_features(augmented, backbone)

            pair_loss = torch.zeros(())
            for scale in sorted(grid_shapes):
                proj_q = model.project_grid(scale, torch.from_numpy(aug_feats[scale]))
                proj_r = model.project_grid(scale, raw_torch[r_id][scale])
                pairs = sample_pairs(
                    proj_q, proj_r, masks[scale], config.gamma, config.theta, rng
                )
                apply_weights(
                    pairs, aug_feats[scale], cache[r_id][scale], delta[scale],
                    grid_shapes[scale],
                )
                pair_loss = pair_loss + contrastive_loss(
                    pairs, config.m_plus, config.m_minus, config.p
                )
            batch_loss = batch_loss + pair_loss / len(grid_shapes)
        batch_loss = batch_loss / config.batch_size
        if not torch.isfinite(batch_loss):
            raise TrainingDiverged(
                f"loss became non-finite at iteration {step} "
                f"(last finite losses: {loss_curve[-5:]})"
            )
        batch_loss.backward()
        optimizer.step()
        loss_curve.append(float(batch_loss.detach()))

    # export projected tensors for every training image
    model.eval()
    export_dir = out_dir / "projected"
    export_dir.mkdir(exist_ok=True)
    entries = []
    with torch.no_grad():
        for image_id in ids:
            paths = {}
            for scale in sorted(grid_shapes):
                proj = model.project_grid(scale, raw_torch[image_id][scale])
                rel = f"{image_id}_s{scale}.cprt"
                write_tensor(proj.numpy().astype(np.float32), scale, export_dir / rel)
                paths[str(scale)] = rel
            entries.append(
                {"image_id": image_id, "tensor_paths": paths, "label": "normal"}
            )
    export_manifest = export_dir / "manifest.json"
    write_manifest(entries, export_manifest)

    checkpoint_path = out_dir / "lrb.pt"
    torch.save(
        {
            "state_dict": model.state_dict(),
            "in_channels": in_channels,
            "out_dim": config.out_dim,
            "config": config.to_dict(),
            "path_widths": "equal, concatenated to 2x out_dim before projection",
        },
        checkpoint_path,
    )
    log_path = out_dir / "training_log.json"
    log_path.write_text(
        json.dumps(
            {
                "config": config.to_dict(),
                "delta": {str(k): v for k, v in delta.items()},
                "loss_curve": loss_curve,
                "images": ids,
                "neighbors": neighbors,
            },
            indent=2,
        )
    )
    return TrainingResult(
        checkpoint_path=checkpoint_path,
        export_dir=export_dir,
        export_manifest=export_manifest,
        log_path=log_path,
        loss_curve=loss_curve,
        delta=delta,
    )


def project_images(
    checkpoint_path, images_source, out_dir, backbone_spec=None
) -> Path:
    """Project new images with a trained checkpoint; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = torch.load(checkpoint_path, map_location="cpu", weights_only=False)
    spec = backbone_spec or state["config"]["backbone"]
    backbone = build_backbone(spec)
    model = MultiScaleProjection(
        {int(k): v for k, v in state["in_channels"].items()}, state["out_dim"]
    )
    model.load_state_dict(state["state_dict"])
    model.eval()
    ids, images = load_images(images_source)
    entries = []
    with torch.no_grad():
        for image_id, image in zip(ids, images):
            feats = extract_features(image, backbone)
            paths = {}
            for scale, grid in feats.items():
                proj = model.project_grid(scale, torch.from_numpy(grid))
                rel = f"{image_id}_s{scale}.cprt"
                write_tensor(proj.numpy().astype(np.float32), scale, out_dir / rel)
                paths[str(scale)] = rel
            entries.append(
                {"image_id": image_id, "tensor_paths": paths, "label": "unknown"}
            )
    manifest = out_dir / "manifest.json"
    write_manifest(entries, manifest)
    return manifest
