"""Feature-pair sampling for metric training.

Pairs come in triplets: a positive pair (same clean coordinate on query and
reference), a remote pair (query coordinate farther than theta from the
reference coordinate, negative only because of distance), and an anomalous
pair (defective query coordinate, same reference coordinate). Remote pairs
are down-weighted by the raw-feature distance of their endpoints so that
"remote but similar" pairs do not fight the objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

KINDS = ("positive", "remote", "anomalous")


@dataclass
class FeaturePair:
    query_vec: torch.Tensor  # unit-normalized (C,)
    ref_vec: torch.Tensor  # unit-normalized (C,)
    label: int  # 1 positive, 0 negative
    kind: str
    coords: tuple[int, int, int, int]  # (r_q, c_q, r_r, c_r)
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pair kind {self.kind!r}")
        if self.kind == "positive" and self.label != 1:
            raise ValueError("positive pairs carry label 1")
        if self.kind != "positive" and self.label != 0:
            raise ValueError("remote/anomalous pairs carry label 0")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


def _rand_coord(rng: np.random.Generator, flat_idx: np.ndarray, w: int):
    pick = int(flat_idx[int(rng.integers(len(flat_idx)))])
    return pick // w, pick % w


def sample_pairs(
    feats_query: torch.Tensor,
    feats_ref: torch.Tensor,
    mask_query: np.ndarray,
    gamma: int,
    theta: float,
    rng: np.random.Generator,
) -> list[FeaturePair]:
    """Draw gamma/3 (positive, remote, anomalous) triplets.

    feats_query/feats_ref are (H, W, C) grids (torch, may carry grad);
    mask_query is the (H, W) binary defect mask of the query image.
    """
    if gamma % 3 != 0 or gamma < 3:
        raise ValueError("gamma must be a positive multiple of 3")
    mask = np.asarray(mask_query)
    h, w = mask.shape
    if feats_query.shape[:2] != (h, w) or feats_ref.shape[:2] != (h, w):
        raise ValueError("feature grids and mask must share (H, W)")
    clean = np.flatnonzero(mask.ravel() == 0)
    defective = np.flatnonzero(mask.ravel() == 1)
    if len(clean) == 0 or len(defective) == 0:
        raise ValueError("mask must contain both clean and defective cells")

    q_norm = F.normalize(feats_query.reshape(-1, feats_query.shape[-1]), dim=-1)
    r_norm = F.normalize(feats_ref.reshape(-1, feats_ref.shape[-1]), dim=-1)

    yy, xx = np.mgrid[0:h, 0:w]
    pairs: list[FeaturePair] = []
    for _ in range(gamma // 3):
        r_q, c_q = _rand_coord(rng, clean, w)
        r_r, c_r = r_q, c_q
        pairs.append(
            FeaturePair(
                query_vec=q_norm[r_q * w + c_q],
                ref_vec=r_norm[r_r * w + c_r],
                label=1,
                kind="positive",
                coords=(r_q, c_q, r_r, c_r),
            )
        )

        far = np.flatnonzero((np.hypot(yy - r_r, xx - c_r) > theta).ravel())
        if len(far) == 0:
            raise ValueError(f"no grid cell farther than theta={theta} from ({r_r}, {c_r})")
        rq2, cq2 = _rand_coord(rng, far, w)
        pairs.append(
            FeaturePair(
                query_vec=q_norm[rq2 * w + cq2],
                ref_vec=r_norm[r_r * w + c_r],
                label=0,
                kind="remote",
                coords=(rq2, cq2, r_r, c_r),
            )
        )

        r_a, c_a = _rand_coord(rng, defective, w)
        pairs.append(
            FeaturePair(
                query_vec=q_norm[r_a * w + c_a],
                ref_vec=r_norm[r_a * w + c_a],
                label=0,
                kind="anomalous",
                coords=(r_a, c_a, r_a, c_a),
            )
        )
    return pairs


def _resize_raw(raw: np.ndarray, h: int, w: int) -> np.ndarray:
    if raw.shape[:2] == (h, w):
        return raw
    t = torch.from_numpy(raw.transpose(2, 0, 1)).unsqueeze(0)
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def pair_weight(
    pair: FeaturePair, raw_query: np.ndarray, raw_ref: np.ndarray, delta: float,
    grid_hw: tuple[int, int],
) -> float:
    """Remote pairs weigh raw-distance / delta; all other kinds weigh 1.

    raw_query/raw_ref are the backbone tensors, resized to the metric grid
    when their spatial size differs.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if pair.kind != "remote":
        return 1.0
    h, w = grid_hw
    rq = _resize_raw(np.asarray(raw_query, dtype=np.float32), h, w)
    rr = _resize_raw(np.asarray(raw_ref, dtype=np.float32), h, w)
    r_q, c_q, r_r, c_r = pair.coords
    dist = float(np.linalg.norm(rq[r_q, c_q].astype(np.float64) - rr[r_r, c_r]))
    return dist / delta


def apply_weights(
    pairs: list[FeaturePair],
    raw_query: np.ndarray,
    raw_ref: np.ndarray,
    delta: float,
    grid_hw: tuple[int, int],
) -> list[FeaturePair]:
    """Fill in the weight field of every pair (in place); returns the list."""
    h, w = grid_hw
    rq = _resize_raw(np.asarray(raw_query, dtype=np.float32), h, w)
    rr = _resize_raw(np.asarray(raw_ref, dtype=np.float32), h, w)
    for pair in pairs:
        if pair.kind == "remote":
            r_q, c_q, r_r, c_r = pair.coords
            dist = float(np.linalg.norm(rq[r_q, c_q].astype(np.float64) - rr[r_r, c_r]))
            pair.weight = dist / delta
        else:
            pair.weight = 1.0
    return pairs
