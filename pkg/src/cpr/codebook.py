"""K-means codebook over patch vectors, code maps and block BoW histograms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_io import FeatureTensor

KMEANS_TOL = 1e-4
KMEANS_MAX_ITER = 100


@dataclass
class Codebook:
    """Cluster centers fitted over pooled reference patch vectors."""

    centers: np.ndarray  # (n_clusters, dim) float32
    rng_seed: int

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float32)
        if self.centers.ndim != 2:
            raise ValueError("centers must be (n_clusters, dim)")
        if not np.isfinite(self.centers).all():
            raise ValueError("centers must be finite")

    @property
    def n_clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


@dataclass
class CodeMap:
    """Per-location nearest-center indices for one tensor."""

    codes: np.ndarray  # (H, W) int32
    n_clusters: int

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.int32)
        if self.codes.ndim != 2:
            raise ValueError("codes must be 2-D")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.n_clusters):
            raise ValueError("code out of range")

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


def _dist2_matrix(v: np.ndarray, c: np.ndarray, v_sq=None) -> np.ndarray:
    """||v - c||^2 for all pairs via the expansion ||v||^2 - 2 v.c + ||c||^2."""
    if v_sq is None:
        v_sq = (v * v).sum(axis=1)
    return v_sq[:, None] - 2.0 * (v @ c.T) + (c * c).sum(axis=1)[None, :]


def _nearest_center(vectors: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the Euclidean-nearest center per vector, ties to lowest index."""
    v = vectors.astype(np.float64, copy=False)
    c = centers.astype(np.float64, copy=False)
    # argmin picks the first (lowest) index on ties
    return np.argmin(_dist2_matrix(v, c), axis=1).astype(np.int32)


def _kmeans_pp_init(
    x: np.ndarray, x_sq: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """Standard D^2-weighted seeding; always picks k distinct points."""
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.maximum(x_sq - 2.0 * (x @ centers[0]) + float(centers[0] @ centers[0]), 0.0)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError(
                f"cannot seed {k} distinct centers: only {j} distinct points available"
            )
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centers[j] = x[idx]
        dj = np.maximum(x_sq - 2.0 * (x @ centers[j]) + float(centers[j] @ centers[j]), 0.0)
        d2 = np.minimum(d2, dj)
    return centers


def kmeans_fit(vectors: np.ndarray, n_clusters: int, seed: int) -> Codebook:
    """Lloyd iterations from D^2 seeding, deterministic for a fixed seed.

    Stops when the max center movement falls below 1e-4 or after 100
    iterations. Empty clusters are re-seeded from the current farthest point.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("vectors must be a non-empty (n, dim) array")
    n = x.shape[0]
    if n_clusters < 1:
        raise ValueError("n_clusters must be >= 1")
    if n < n_clusters:
        raise ValueError(f"fewer vectors ({n}) than clusters ({n_clusters})")

    rng = np.random.default_rng(seed)
    x_sq = (x * x).sum(axis=1)
    centers = _kmeans_pp_init(x, x_sq, n_clusters, rng)

    prev_inertia = np.inf
    for _ in range(KMEANS_MAX_ITER):
        dist = _dist2_matrix(x, centers, x_sq)
        codes = np.argmin(dist, axis=1).astype(np.int32)
        d2 = np.maximum(dist[np.arange(n), codes], 0.0)

        # re-seed empty clusters from the farthest point before the mean update
        counts = np.bincount(codes, minlength=n_clusters)
        for j in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(d2))
            centers[j] = x[far]
            codes[far] = j
            d2[far] = 0.0
            counts = np.bincount(codes, minlength=n_clusters)

        inertia = float(d2.sum())
        assert inertia <= prev_inertia * (1 + 1e-12) + 1e-12, "inertia increased"
        prev_inertia = inertia

        # segment sum as a GEMM: one-hot.T @ x is much faster than ufunc.at
        onehot = np.zeros((n, n_clusters), dtype=np.float64)
        onehot[np.arange(n), codes] = 1.0
        new_centers = onehot.T @ x
        new_centers /= counts[:, None]
        movement = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if movement < KMEANS_TOL:
            break

    return Codebook(centers=centers.astype(np.float32), rng_seed=int(seed))


def assign_codes(t: FeatureTensor, cb: Codebook) -> CodeMap:
    """Map every grid location to its nearest center index."""
    if t.channels != cb.dim:
        raise ValueError(f"tensor channels {t.channels} != codebook dim {cb.dim}")
    codes = _nearest_center(t.vectors(), cb.centers).reshape(t.height, t.width)
    return CodeMap(codes=codes, n_clusters=cb.n_clusters)


def assign_vector_codes(vectors: np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest-center indices for a flat (n, dim) vector batch."""
    vectors = np.asarray(vectors)
    if vectors.shape[1] != cb.dim:
        raise ValueError(f"vector dim {vectors.shape[1]} != codebook dim {cb.dim}")
    return _nearest_center(vectors, cb.centers)


def bow_histogram(block: np.ndarray, cb: Codebook) -> np.ndarray:
    """L1-normalized histogram of nearest-center assignments for a block.

    block is (n, dim); returns (n_clusters,) float32 summing to 1.
    """
    block = np.asarray(block)
    if block.ndim != 2 or block.shape[0] == 0:
        raise ValueError("block must be a non-empty (n, dim) array")
    codes = assign_vector_codes(block, cb)
    counts = np.bincount(codes, minlength=cb.n_clusters).astype(np.float64)
    return (counts / counts.sum()).astype(np.float32)


def block_bounds(n: int, s: int) -> list[tuple[int, int]]:
    """Floor-rule boundaries tiling [0, n) into s contiguous runs."""
    return [(u * n // s, (u + 1) * n // s) for u in range(s)]


def block_partition(t: FeatureTensor, s: int) -> list[list[np.ndarray]]:
    """Split the grid into s x s blocks of flattened patch vectors.

    Block (u, v) covers rows [u*H//s, (u+1)*H//s) x cols [v*W//s, (v+1)*W//s);
    blocks tile the grid exactly with no overlap.
    """
    if s < 1:
        raise ValueError("grid size must be >= 1")
    if s > t.height or s > t.width:
        raise ValueError(f"grid size {s} exceeds tensor grid ({t.height}, {t.width})")
    rows = block_bounds(t.height, s)
    cols = block_bounds(t.width, s)
    c = t.channels
    return [
        [t.data[r0:r1, c0:c1].reshape(-1, c) for (c0, c1) in cols]
        for (r0, r1) in rows
    ]
