"""Image-level signatures and robust truncated-KL nearest-neighbor retrieval.

A signature is an S x S grid of block BoW histograms. The distance between
two images sorts the S^2 block-wise KL divergences and averages the smallest
S^2 - tau, which makes the match robust to partially contaminated blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook, assign_vector_codes, block_bounds
from .tensor_io import FeatureTensor

DEFAULT_KL_EPS = 1e-8


@dataclass
class GlobalSignature:
    """S x S grid of L1-normalized histograms, shape (s, s, n_clusters)."""

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 3 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError("signature grid must be (s, s, n_clusters)")

    @property
    def s(self) -> int:
        return self.grid.shape[0]

    @property
    def n_clusters(self) -> int:
        return self.grid.shape[2]


@dataclass
class GlobalIndex:
    """Signatures of all reference images, aligned with the local banks."""

    image_ids: list[str]
    grids: np.ndarray  # (N, s, s, n_clusters) float32

    def __post_init__(self):
        self.grids = np.ascontiguousarray(self.grids, dtype=np.float32)
        if self.grids.ndim != 4:
            raise ValueError("grids must be (N, s, s, n_clusters)")
        if len(self.image_ids) != self.grids.shape[0]:
            raise ValueError("image_ids and grids disagree on N")
        if len(set(self.image_ids)) != len(self.image_ids):
            raise ValueError("image_ids must be unique")

    def __len__(self) -> int:
        return self.grids.shape[0]

    def signature(self, i: int) -> GlobalSignature:
        return GlobalSignature(grid=self.grids[i])


@dataclass
class NeighborList:
    """Top-k reference matches, ascending by distance, ties by lower index."""

    indices: np.ndarray  # (k,) int
    distances: np.ndarray  # (k,) float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        if self.indices.shape != self.distances.shape or self.indices.ndim != 1:
            raise ValueError("indices/distances must be 1-D and equal length")

    def __len__(self) -> int:
        return len(self.indices)


def _block_index_map(h: int, w: int, s: int) -> np.ndarray:
    """Flat block id per grid location under the floor-boundary tiling."""
    row_id = np.repeat(np.arange(s), np.diff([b[0] for b in block_bounds(h, s)] + [h]))
    col_id = np.repeat(np.arange(s), np.diff([b[0] for b in block_bounds(w, s)] + [w]))
    return (row_id[:, None] * s + col_id[None, :]).ravel()


def compute_signature(t: FeatureTensor, cb: Codebook, s: int) -> GlobalSignature:
    """Block-partition the tensor and histogram nearest-center codes per block."""
    if t.channels != cb.dim:
        raise ValueError(f"tensor channels {t.channels} != codebook dim {cb.dim}")
    if s > min(t.height, t.width):
        raise ValueError(f"grid size {s} exceeds tensor grid ({t.height}, {t.width})")
    codes = assign_vector_codes(t.vectors(), cb)
    nc = cb.n_clusters
    combined = _block_index_map(t.height, t.width, s) * nc + codes
    counts = np.bincount(combined, minlength=s * s * nc).reshape(s, s, nc)
    grid = (counts / counts.sum(axis=-1, keepdims=True)).astype(np.float32)
    return GlobalSignature(grid=grid)


def _smooth(h: np.ndarray, eps: float) -> np.ndarray:
    n = h.shape[-1]
    return (h + eps) / (1.0 + n * eps)


def kl_divergence(h_ref: np.ndarray, h_tst: np.ndarray, eps: float = DEFAULT_KL_EPS) -> float:
    """KL(smooth(h_ref) || smooth(h_tst)); smoothing keeps zero bins finite."""
    h_ref = np.asarray(h_ref, dtype=np.float64)
    h_tst = np.asarray(h_tst, dtype=np.float64)
    if h_ref.shape != h_tst.shape:
        raise ValueError(f"bin count mismatch: {h_ref.shape} vs {h_tst.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    p = _smooth(h_ref, eps)
    q = _smooth(h_tst, eps)
    return float(np.sum(p * np.log(p / q)))


def _block_divergences(
    grid_ref: np.ndarray, grid_tst: np.ndarray, eps: float
) -> np.ndarray:
    """Per-block KL(ref || tst) for stacked (..., s, s, n) signature grids."""
    p = _smooth(grid_ref.astype(np.float64), eps)
    q = _smooth(grid_tst.astype(np.float64), eps)
    return np.sum(p * np.log(p / q), axis=-1)


def global_distance(
    sig_ref: GlobalSignature,
    sig_tst: GlobalSignature,
    tau: int,
    eps: float = DEFAULT_KL_EPS,
) -> float:
    """Mean of the S^2 - tau smallest block divergences between two signatures."""
    if sig_ref.grid.shape != sig_tst.grid.shape:
        raise ValueError("signature shapes differ")
    s2 = sig_ref.s * sig_ref.s
    if not 0 <= tau < s2:
        raise ValueError(f"tau must be in [0, {s2}), got {tau}")
    div = np.sort(_block_divergences(sig_ref.grid, sig_tst.grid, eps).ravel())
    return float(div[: s2 - tau].mean())


def top_k(
    index: GlobalIndex,
    query: GlobalSignature,
    k: int,
    tau: int,
    eps: float = DEFAULT_KL_EPS,
) -> NeighborList:
    """k nearest references by truncated-KL distance (all of them if k > N)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(index)
    if n == 0:
        raise RuntimeError("global index is empty")
    if index.grids.shape[1:] != query.grid.shape:
        raise ValueError("query signature shape differs from index")
    s2 = query.s * query.s
    if not 0 <= tau < s2:
        raise ValueError(f"tau must be in [0, {s2}), got {tau}")

    div = _block_divergences(index.grids, query.grid[None], eps).reshape(n, s2)
    div.sort(axis=1)
    dists = div[:, : s2 - tau].mean(axis=1)
    order = np.lexsort((np.arange(n), dists))[: min(k, n)]
    return NeighborList(indices=order, distances=dists[order])
