"""Foreground estimation: pseudo-labels from code maps, a per-patch linear

classifier, foreground map fusion and anomaly-map masking.

Pseudo-labeling assumes the photographed object sits in the center of the
grid: the thin border band supplies background samples (restricted to the
band's majority code to cut ambiguity) and the central box supplies
foreground samples (locations carrying the majority code are dropped).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import CodeMap
from .errors import DegenerateLabelsError
from .local_retrieval import AnomalyMap
from .tensor_io import FeatureTensor

DEFAULT_BORDER_FRAC = 0.125
DEFAULT_CENTER_FRAC = 0.5
DEFAULT_EPOCHS = 200
DEFAULT_LR = 0.1


@dataclass
class RegionSpec:
    """Geometry of the background band and the central foreground box."""

    border_frac: float = DEFAULT_BORDER_FRAC
    center_frac: float = DEFAULT_CENTER_FRAC

    def __post_init__(self):
        if not 0 < self.border_frac < 0.5:
            raise ValueError("border_frac must be in (0, 0.5)")
        if not 0 < self.center_frac < 1:
            raise ValueError("center_frac must be in (0, 1)")
        if self.border_frac >= (1 - self.center_frac) / 2:
            raise ValueError("border band and center box must be disjoint")

    def band_width(self, n: int) -> int:
        return max(1, int(self.border_frac * n))

    def center_bounds(self, n: int) -> tuple[int, int]:
        size = max(1, int(self.center_frac * n))
        start = (n - size) // 2
        return start, start + size


@dataclass
class PseudoLabelSet:
    """Foreground/background patch coordinates sampled from one image."""

    image_id: str
    positives: np.ndarray  # (n, 2) int rows of (row, col)
    negatives: np.ndarray  # (m, 2) int
    majority_code: int
    warning: str | None = None

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=np.int64).reshape(-1, 2)
        self.negatives = np.asarray(self.negatives, dtype=np.int64).reshape(-1, 2)


@dataclass
class LinearForegroundModel:
    """Per-patch logistic classifier: p(foreground) = sigmoid(w . x + b)."""

    weights: np.ndarray  # (C,) float
    bias: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if not np.isfinite(self.weights).all() or not np.isfinite(self.bias):
            raise ValueError("model parameters must be finite")


def border_band_mask(h: int, w: int, region: RegionSpec) -> np.ndarray:
    bw_r = region.band_width(h)
    bw_c = region.band_width(w)
    mask = np.zeros((h, w), dtype=bool)
    mask[:bw_r, :] = True
    mask[h - bw_r :, :] = True
    mask[:, :bw_c] = True
    mask[:, w - bw_c :] = True
    return mask


def center_box_mask(h: int, w: int, region: RegionSpec) -> np.ndarray:
    r0, r1 = region.center_bounds(h)
    c0, c1 = region.center_bounds(w)
    mask = np.zeros((h, w), dtype=bool)
    mask[r0:r1, c0:c1] = True
    return mask


def pseudo_labels(
    code_map: CodeMap, region: RegionSpec, n_clusters: int, image_id: str = ""
) -> PseudoLabelSet:
    """Derive background/foreground samples from one code map.

    The majority code of the border band (ties to the lowest code) defines
    background; band locations with that code become negatives, center-box
    locations with any other code become positives.
    """
    h, w = code_map.height, code_map.width
    band = border_band_mask(h, w, region)
    center = center_box_mask(h, w, region)

    band_codes = code_map.codes[band]
    counts = np.bincount(band_codes, minlength=n_clusters)
    majority = int(np.argmax(counts))  # argmax takes the lowest index on ties

    neg_mask = band & (code_map.codes == majority)
    pos_mask = center & (code_map.codes != majority)
    negatives = np.argwhere(neg_mask)
    positives = np.argwhere(pos_mask)

    warning = None
    if len(positives) == 0:
        warning = "center box empty after majority-code exclusion; negatives only"
    return PseudoLabelSet(
        image_id=image_id,
        positives=positives,
        negatives=negatives,
        majority_code=majority,
        warning=warning,
    )


def _logistic_loss(z: np.ndarray, y: np.ndarray) -> float:
    # stable mean log(1 + exp(-y*z)) with y in {-1, +1}
    m = -y * z
    return float(np.mean(np.logaddexp(0.0, m)))


def train_foreground(
    raw_tensors: list[FeatureTensor],
    labels: list[PseudoLabelSet],
    epochs: int = DEFAULT_EPOCHS,
    lr: float = DEFAULT_LR,
) -> LinearForegroundModel:
    """Fit the logistic classifier by full-batch gradient descent.

    Features are standardized internally for conditioning and the affine
    transform is folded back into (weights, bias), so the returned model
    applies directly to raw patch vectors. Steps that would increase the
    loss are halved until they do not, which keeps the per-epoch training
    loss non-increasing (asserted).
    """
    if len(raw_tensors) != len(labels):
        raise ValueError("one pseudo-label set per tensor required")
    xs, ys = [], []
    for t, lab in zip(raw_tensors, labels):
        if len(lab.positives):
            xs.append(t.data[lab.positives[:, 0], lab.positives[:, 1]])
            ys.append(np.ones(len(lab.positives)))
        if len(lab.negatives):
            xs.append(t.data[lab.negatives[:, 0], lab.negatives[:, 1]])
            ys.append(-np.ones(len(lab.negatives)))
    if not xs:
        raise DegenerateLabelsError("no pseudo-label samples; disable foreground branch")
    x = np.concatenate(xs).astype(np.float64)
    y = np.concatenate(ys)
    if (y > 0).sum() == 0 or (y < 0).sum() == 0:
        raise DegenerateLabelsError(
            "single-class pseudo-labels; disable foreground branch"
        )

    mu = x.mean(axis=0)
    sigma = x.std(axis=0)
    sigma[sigma < 1e-12] = 1.0
    xs_std = (x - mu) / sigma

    n, c = xs_std.shape
    w = np.zeros(c)
    b = 0.0
    loss = _logistic_loss(xs_std @ w + b, y)
    for _ in range(int(epochs)):
        z = xs_std @ w + b
        # grad of mean log(1+exp(-y z)) is -mean(y * sigmoid(-y z) * x)
        s = 1.0 / (1.0 + np.exp(y * z))
        gw = -(xs_std * (y * s)[:, None]).mean(axis=0)
        gb = -float((y * s).mean())
        step = lr
        for _ in range(50):
            w_new = w - step * gw
            b_new = b - step * gb
            new_loss = _logistic_loss(xs_std @ w_new + b_new, y)
            if new_loss <= loss + 1e-12:
                break
            step *= 0.5
        assert new_loss <= loss + 1e-6, "logistic loss increased"
        w, b, loss = w_new, b_new, new_loss

    return LinearForegroundModel(weights=w / sigma, bias=float(b - np.sum(w * mu / sigma)))


def predict_foreground(raw: FeatureTensor, model: LinearForegroundModel) -> np.ndarray:
    """Per-location sigmoid(w . p + b); returns an (H, W) float32 map in [0, 1]."""
    if raw.channels != model.weights.shape[0]:
        raise ValueError(
            f"tensor channels {raw.channels} != model dim {model.weights.shape[0]}"
        )
    z = raw.data.astype(np.float64) @ model.weights + model.bias
    return (1.0 / (1.0 + np.exp(-z))).astype(np.float32)


def fuse_foreground(f_tst: np.ndarray, f_neighbors: list[np.ndarray]) -> np.ndarray:
    """Element-wise maximum of the query map and its neighbors' maps."""
    out = np.asarray(f_tst, dtype=np.float32).copy()
    for f in f_neighbors:
        f = np.asarray(f, dtype=np.float32)
        if f.shape != out.shape:
            raise ValueError(f"foreground map shape {f.shape} != {out.shape}")
        np.maximum(out, f, out=out)
    return out


def apply_foreground(a_mul: AnomalyMap, f_star: np.ndarray) -> AnomalyMap:
    """Mask the aggregated anomaly map by the fused foreground confidence."""
    f_star = np.asarray(f_star, dtype=np.float32)
    if f_star.shape != a_mul.values.shape:
        raise ValueError(
            f"foreground map shape {f_star.shape} != anomaly map {a_mul.values.shape}"
        )
    return AnomalyMap(values=a_mul.values * f_star, meta=dict(a_mul.meta))
