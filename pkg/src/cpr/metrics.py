"""Detection metrics: image/pixel AUROC, average precision and per-region

overlap. All four are computed from exact definitions (rank statistics and
full sweeps over unique score thresholds), so small instances can be checked
against brute-force references without discretization slack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError

DEFAULT_FPR_LIMIT = 0.3

STRUCTURE_8 = np.ones((3, 3), dtype=bool)
STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class MetricReport:
    image_auroc: float
    pixel_auroc: float
    pro: float
    ap: float
    counts: dict

    def to_dict(self) -> dict:
        return {
            "image_auroc": self.image_auroc,
            "pixel_auroc": self.pixel_auroc,
            "pro": self.pro,
            "ap": self.ap,
            "counts": self.counts,
        }


def _check_binary_labels(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (midrank)."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum (tie-aware) formulation."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    _check_binary_labels(labels)
    p = int(labels.sum())
    n = len(labels) - p
    if p == 0 or n == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    _check_binary_labels(labels)
    total_pos = int(labels.sum())
    if total_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")

    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # evaluate P/R only at the last element of each tied-score run
    last_of_run = np.r_[sorted_scores[1:] != sorted_scores[:-1], True]
    tp = tp[last_of_run]
    fp = fp[last_of_run]
    precision = tp / (tp + fp)
    recall = tp / total_pos
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def _label_regions(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    structure = STRUCTURE_8 if connectivity == 8 else STRUCTURE_4
    return ndimage.label(mask, structure=structure)


def pro_curve(
    maps: list[np.ndarray], masks: list[np.ndarray], connectivity: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, mean_region_overlap) over the full sweep of unique map values.

    Points are ordered by increasing FPR, starting at the implicit (0, 0)
    of an empty prediction.
    """
    if len(maps) != len(masks) or not maps:
        raise ValueError("maps and masks must be non-empty and aligned")

    region_sizes: list[int] = []
    region_ids: list[np.ndarray] = []  # per pair: (H, W) region index or -1
    neg_total = 0
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap)
        mask = np.asarray(mask)
        if amap.shape != mask.shape:
            raise ValueError(f"map shape {amap.shape} != mask shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("masks must be binary")
        labeled, n_regions = _label_regions(mask.astype(np.int64), connectivity)
        ids = labeled.astype(np.int64) - 1
        ids[ids >= 0] += len(region_sizes)
        region_ids.append(ids)
        for rid in range(1, n_regions + 1):
            region_sizes.append(int((labeled == rid).sum()))
        neg_total += int((mask == 0).sum())
    if not region_sizes:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    if neg_total == 0:
        raise UndefinedMetricError("PRO needs negative pixels for the FPR axis")

    all_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    flat_regions = np.concatenate([ids.ravel() for ids in region_ids])
    thresholds = np.unique(all_scores)[::-1]  # descending

    # sort pixels by descending score; walk thresholds accumulating hits
    order = np.argsort(-all_scores, kind="mergesort")
    sorted_scores = all_scores[order]
    sorted_regions = flat_regions[order]

    sizes = np.asarray(region_sizes, dtype=np.float64)
    hits = np.zeros(len(region_sizes), dtype=np.float64)
    fp = 0
    fprs = [0.0]
    pros = [0.0]
    pos = 0
    for t in thresholds:
        while pos < len(sorted_scores) and sorted_scores[pos] >= t:
            rid = sorted_regions[pos]
            if rid >= 0:
                hits[rid] += 1
            else:
                fp += 1
            pos += 1
        fprs.append(fp / neg_total)
        pros.append(float((hits / sizes).mean()))
    return np.asarray(fprs), np.asarray(pros)


def pro_score(
    maps: list[np.ndarray],
    masks: list[np.ndarray],
    fpr_limit: float = DEFAULT_FPR_LIMIT,
    connectivity: int = 8,
) -> float:
    """Mean per-region overlap integrated over FPR up to fpr_limit, normalized."""
    if not 0 < fpr_limit <= 1:
        raise ValueError("fpr_limit must be in (0, 1]")
    fprs, pros = pro_curve(maps, masks, connectivity)

    # clip the curve at fpr_limit, interpolating the boundary point
    if fprs[-1] < fpr_limit:
        # curve never reaches the limit; extend flat at the last overlap value
        fprs = np.r_[fprs, fpr_limit]
        pros = np.r_[pros, pros[-1]]
    keep = fprs <= fpr_limit
    fprs_kept = fprs[keep]
    pros_kept = pros[keep]
    if fprs_kept[-1] < fpr_limit:
        idx = int(np.searchsorted(fprs, fpr_limit, side="right"))
        f0, f1 = fprs[idx - 1], fprs[idx]
        p0, p1 = pros[idx - 1], pros[idx]
        boundary = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0)
        fprs_kept = np.r_[fprs_kept, fpr_limit]
        pros_kept = np.r_[pros_kept, boundary]
    return float(np.trapezoid(pros_kept, fprs_kept) / fpr_limit)


def evaluate(
    image_scores,
    image_labels,
    maps: list[np.ndarray],
    masks: list[np.ndarray],
    fpr_limit: float = DEFAULT_FPR_LIMIT,
    connectivity: int = 8,
) -> MetricReport:
    """All four metrics in one pass over stored outputs.

    Image metrics use (image_scores, image_labels); pixel metrics pool every
    (map, mask) pair.
    """
    image_scores = np.asarray(image_scores, dtype=np.float64).ravel()
    image_labels = np.asarray(image_labels).ravel().astype(np.int64)
    if len(image_scores) == 0:
        raise ValueError("no samples to evaluate")

    pixel_scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    pixel_labels = np.concatenate([np.asarray(m).ravel().astype(np.int64) for m in masks])

    report = MetricReport(
        image_auroc=auroc(image_scores, image_labels),
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        pro=pro_score(maps, masks, fpr_limit, connectivity),
        ap=average_precision(pixel_scores, pixel_labels),
        counts={
            "image_positives": int(image_labels.sum()),
            "image_negatives": int(len(image_labels) - image_labels.sum()),
            "pixel_positives": int(pixel_labels.sum()),
            "pixel_negatives": int(len(pixel_labels) - pixel_labels.sum()),
        },
    )
    return report
