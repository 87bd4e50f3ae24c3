"""JIT-compiled inner loop for the window-constrained similarity search.

Optional: local_nn falls back to a vectorized numpy path when numba is
unavailable. The kernel is single-threaded and releases the GIL; callers
parallelize by splitting the grid into disjoint row ranges, which keeps
results bit-identical for any split.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(fastmath=True, cache=True, nogil=True)
def window_best_sim_rows(stack, ids, q, half, out, row_start, row_stop):
    """Max dot product per query cell over selected references and window.

    stack: (N, H, W, C) float32 bank, ids: (K,) int64 reference subset,
    q: (H, W, C) float32 unit query vectors, out: (H, W) float32. Only rows
    in [row_start, row_stop) are written.
    """
    _, height, width, channels = stack.shape
    k = ids.shape[0]
    for r in range(row_start, row_stop):
        r0 = r - half if r - half > 0 else 0
        r1 = r + half + 1 if r + half + 1 < height else height
        for c in range(width):
            c0 = c - half if c - half > 0 else 0
            c1 = c + half + 1 if c + half + 1 < width else width
            best = np.float32(-2.0)
            for kk in range(k):
                j = ids[kk]
                for rr in range(r0, r1):
                    for cc in range(c0, c1):
                        acc = np.float32(0.0)
                        for ch in range(channels):
                            acc += stack[j, rr, cc, ch] * q[r, c, ch]
                        if acc > best:
                            best = acc
            out[r, c] = best
