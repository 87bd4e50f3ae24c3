"""Synthetic defect blending for training-time augmentation.

A defect is an irregular blob (union of 1-3 random ellipses) filled with
either noise around a random color or a flipped crop of the image itself,
alpha-blended in. The binary mask marks exactly the altered pixels and is
never empty (degenerate samples are redrawn).
"""

from __future__ import annotations

import numpy as np


def _ellipse_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    cy = rng.uniform(0.2 * h, 0.8 * h)
    cx = rng.uniform(0.2 * w, 0.8 * w)
    ay = rng.uniform(0.05 * h, 0.25 * h)
    ax = rng.uniform(0.05 * w, 0.25 * w)
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ys = (yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
    xs = -(yy - cy) * np.sin(angle) + (xx - cx) * np.cos(angle)
    return (ys / ay) ** 2 + (xs / ax) ** 2 <= 1.0


def synth_anomaly(
    image: np.ndarray,
    rng: np.random.Generator,
    alpha: float | None = None,
    region: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Blend an irregular patch into an RGB image.

    Returns (augmented uint8 image, binary pixel mask of altered pixels).
    alpha and region are normally sampled; they can be pinned for tests.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    if region is None:
        for _ in range(20):
            region = np.zeros((h, w), dtype=bool)
            for _ in range(int(rng.integers(1, 4))):
                region |= _ellipse_mask(rng, h, w)
            if region.any():
                break
        else:
            raise RuntimeError("could not sample a non-empty defect region")
    else:
        region = np.asarray(region, dtype=bool)
        if not region.any():
            raise ValueError("pinned region must be non-empty")

    if rng.random() < 0.5:
        color = rng.uniform(0, 255, size=3)
        fill = color[None, None, :] + rng.normal(0, 20, size=(h, w, 3))
    else:
        fill = image[::-1, ::-1].astype(np.float64)  # flipped self-crop
    if alpha is None:
        alpha = float(rng.uniform(0.5, 1.0))
    out = image.astype(np.float64).copy()
    out[region] = (1 - alpha) * out[region] + alpha * fill[region]
    out = np.clip(out, 0, 255).astype(np.uint8)

    changed = np.any(out != image, axis=-1)
    mask = (region & changed).astype(np.uint8)
    if not mask.any():
        # pathological blend (fill matched the image); force the region
        mask = region.astype(np.uint8)
    return out, mask


def downsample_mask(
    mask: np.ndarray, grid_h: int, grid_w: int, cell_threshold: float = 0.3
) -> np.ndarray:
    """Grid cell is defective iff >= cell_threshold of its pixels are altered.

    Cells follow the same floor-boundary tiling the engine uses for blocks.
    """
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    out = np.zeros((grid_h, grid_w), dtype=np.uint8)
    for u in range(grid_h):
        r0, r1 = u * h // grid_h, (u + 1) * h // grid_h
        for v in range(grid_w):
            c0, c1 = v * w // grid_w, (v + 1) * w // grid_w
            cell = mask[r0:r1, c0:c1]
            if cell.size and cell.mean() >= cell_threshold:
                out[u, v] = 1
    return out
