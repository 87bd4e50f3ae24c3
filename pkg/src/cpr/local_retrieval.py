"""Window-constrained nearest-neighbor search over retrieved references.

Each query patch is matched against the patches of the K retrieved reference
tensors at nearby grid coordinates only (odd window w, offsets up to
(w-1)/2 per axis, clipped at the borders). The per-patch anomaly score is
the minimal cosine distance found. Banks pre-normalize their vectors once
so the inner loop is a plain dot product.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

import os
from concurrent.futures import ThreadPoolExecutor

from .tensor_io import FeatureTensor

try:
    from ._window_kernel import window_best_sim_rows as _jit_window_rows
except ImportError:  # pragma: no cover - numba not installed
    _jit_window_rows = None

ZERO_NORM_EPS = 1e-12

# row-chunk threshold: below this many multiply-adds a single kernel call
# beats the pool dispatch overhead
_PARALLEL_MIN_WORK = 2_000_000
_intra_query_rows_enabled = True
_pool: ThreadPoolExecutor | None = None


def set_row_parallelism(enabled: bool) -> None:
    """Toggle intra-query row chunking.

    Chunking minimizes single-query latency; disable it when many queries
    run on concurrent workers so they do not contend for the row pool.
    Results are bit-identical either way.
    """
    global _intra_query_rows_enabled
    _intra_query_rows_enabled = bool(enabled)


def _row_pool() -> ThreadPoolExecutor:
    global _pool
    if _pool is None:
        _pool = ThreadPoolExecutor(max_workers=min(4, os.cpu_count() or 1))
    return _pool


@dataclass
class RetrievalWindow:
    """Odd square search window; size 1 means same-coordinate only."""

    size: int

    def __post_init__(self):
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"window size must be odd and positive, got {self.size}")

    @property
    def half(self) -> int:
        return (self.size - 1) // 2


@dataclass
class AnomalyMap:
    """Per-location anomaly scores; cosine distances lie in [0, 2]."""

    values: np.ndarray  # (H, W) float32
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("anomaly map must be 2-D")
        if not np.isfinite(self.values).all():
            raise ValueError("anomaly map must be finite")
        if self.values.size and self.values.min() < 0:
            raise ValueError("anomaly map must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def normalize_vectors(data: np.ndarray) -> tuple[np.ndarray, bool]:
    """Scale each (..., C) vector to unit L2 norm; zero vectors stay zero."""
    data = np.asarray(data, dtype=np.float32)
    flat = data.reshape(-1, data.shape[-1])
    norms = np.sqrt(np.einsum("nc,nc->n", flat, flat, dtype=np.float64))
    zero = norms <= ZERO_NORM_EPS
    has_zero = bool(zero.any())
    if has_zero:
        norms = np.where(zero, 1.0, norms)
    out = (flat / norms[:, None].astype(np.float32)).astype(np.float32)
    if has_zero:
        out[zero] = 0.0
    return np.ascontiguousarray(out.reshape(data.shape)), has_zero


@dataclass
class LocalFeatureBank:
    """Stacked reference tensors for one scale, index-aligned with the

    global index. Vectors are unit-normalized when `normalized` is set.
    """

    scale_id: int
    stack: np.ndarray  # (N, H, W, C) float32
    normalized: bool = True
    has_zero_vectors: bool = False

    def __post_init__(self):
        self.stack = np.ascontiguousarray(self.stack, dtype=np.float32)
        if self.stack.ndim != 4:
            raise ValueError("bank stack must be (N, H, W, C)")

    @classmethod
    def from_tensors(
        cls, tensors: list[FeatureTensor], scale_id: int, normalize: bool = True
    ) -> "LocalFeatureBank":
        if not tensors:
            raise ValueError("bank requires at least one tensor")
        shapes = {t.shape for t in tensors}
        if len(shapes) != 1:
            raise ValueError(f"bank tensors must share one shape, got {sorted(shapes)}")
        stack = np.stack([t.data for t in tensors]).astype(np.float32)
        has_zero = False
        if normalize:
            stack, has_zero = normalize_vectors(stack)
        return cls(scale_id=scale_id, stack=stack, normalized=normalize,
                   has_zero_vectors=has_zero)

    @property
    def n_references(self) -> int:
        return self.stack.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(self.stack.shape[1:])


def local_nn(
    query: FeatureTensor,
    bank: LocalFeatureBank,
    neighbor_ids,
    window: RetrievalWindow,
) -> AnomalyMap:
    """Minimal cosine distance per query patch over the selected references.

    For each (r, c) the candidates are all bank vectors at offsets within
    (w-1)/2 per axis (clipped at borders) across the given references. A
    zero-norm vector on either side scores cosine 0 (distance 1); zero-norm
    query vectors are flagged in the result meta.
    """
    neighbor_ids = np.asarray(neighbor_ids, dtype=np.int64).ravel()
    if neighbor_ids.size == 0:
        raise ValueError("neighbor_ids must be non-empty")
    if neighbor_ids.min() < 0 or neighbor_ids.max() >= bank.n_references:
        raise ValueError("neighbor id out of range")
    if query.shape != bank.grid_shape:
        raise ValueError(f"query shape {query.shape} != bank shape {bank.grid_shape}")
    h, w_grid, _ = query.shape
    if window.size > 2 * min(h, w_grid) - 1:
        raise ValueError(f"window size {window.size} too large for grid ({h}, {w_grid})")

    q, had_zero_query = normalize_vectors(query.data)
    half = window.half
    if _jit_window_rows is not None and bank.normalized:
        best = np.empty((h, w_grid), dtype=np.float32)
        work = len(neighbor_ids) * window.size**2 * q.size
        n_chunks = 1
        if _intra_query_rows_enabled and work >= _PARALLEL_MIN_WORK:
            n_chunks = min(4, os.cpu_count() or 1)
        if n_chunks > 1 and h >= n_chunks:
            bounds = np.linspace(0, h, n_chunks + 1).astype(np.int64)
            futures = [
                _row_pool().submit(
                    _jit_window_rows, bank.stack, neighbor_ids, q, half, best,
                    int(bounds[i]), int(bounds[i + 1]),
                )
                for i in range(n_chunks)
            ]
            for f in futures:
                f.result()
        else:
            _jit_window_rows(bank.stack, neighbor_ids, q, half, best, 0, h)
    else:
        best = _window_best_sim_numpy(bank, neighbor_ids, q, half)

    np.subtract(1.0, best, out=best)
    values = np.clip(best, 0.0, 2.0, out=best)
    meta = {}
    if had_zero_query:
        meta["zero_query_vectors"] = True
    return AnomalyMap(values=values, meta=meta)


def _window_best_sim_numpy(
    bank: LocalFeatureBank, neighbor_ids: np.ndarray, q: np.ndarray, half: int
) -> np.ndarray:
    """Per-offset einsum fallback for the window similarity search."""
    h, w_grid = q.shape[:2]
    refs = bank.stack[neighbor_ids]
    if not bank.normalized:
        refs, _ = normalize_vectors(refs)
    best = np.full((h, w_grid), -np.inf, dtype=np.float32)
    for dr in range(-half, half + 1):
        r0, r1 = max(0, -dr), min(h, h - dr)
        if r0 >= r1:
            continue
        for dc in range(-half, half + 1):
            c0, c1 = max(0, -dc), min(w_grid, w_grid - dc)
            if c0 >= c1:
                continue
            sims = np.einsum(
                "khwc,hwc->khw",
                refs[:, r0 + dr : r1 + dr, c0 + dc : c1 + dc, :],
                q[r0:r1, c0:c1, :],
            )
            np.maximum(best[r0:r1, c0:c1], sims.max(axis=0), out=best[r0:r1, c0:c1])
    return best


def upsample(amap: AnomalyMap, out_h: int, out_w: int) -> AnomalyMap:
    """Bilinear upsampling with half-pixel sample centers ((i+0.5)/n)."""
    h, w = amap.height, amap.width
    if out_h < h or out_w < w:
        raise ValueError(f"cannot shrink ({h}, {w}) to ({out_h}, {out_w})")
    if out_h == h and out_w == w:
        return AnomalyMap(values=amap.values.copy(), meta=dict(amap.meta))
    values = bilinear_resize(amap.values, out_h, out_w)
    return AnomalyMap(values=np.maximum(values, 0.0), meta=dict(amap.meta))


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D float array with the half-pixel-center convention."""
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape

    def axis_weights(n_in, n_out):
        coords = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        coords = np.clip(coords, 0.0, n_in - 1.0)
        lo = np.floor(coords).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = coords - lo
        return lo, hi, frac

    ry0, ry1, fy = axis_weights(h, out_h)
    rx0, rx1, fx = axis_weights(w, out_w)
    top = grid[ry0][:, rx0] * (1 - fx)[None, :] + grid[ry0][:, rx1] * fx[None, :]
    bot = grid[ry1][:, rx0] * (1 - fx)[None, :] + grid[ry1][:, rx1] * fx[None, :]
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(np.float32)


def aggregate_scales(maps: list[AnomalyMap], out_h: int, out_w: int) -> AnomalyMap:
    """Element-wise sum of all maps upsampled to a common grid."""
    if not maps:
        raise ValueError("at least one map required")
    total = np.zeros((out_h, out_w), dtype=np.float32)
    meta: dict = {}
    for m in maps:
        up = upsample(m, out_h, out_w)
        total += up.values
        meta.update(up.meta)
    return AnomalyMap(values=total, meta=meta)
