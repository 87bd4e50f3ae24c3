import numpy as np
import pytest

from cpr.errors import UndefinedMetricError
from cpr.metrics import auroc, average_precision, evaluate, pro_score
from oracles import ap_threshold_sweep, auroc_pair_count, pro_sweep


def test_auroc_perfect_separation():
    scores = [0.1, 0.2, 0.9, 0.8]
    labels = [0, 0, 1, 1]
    assert auroc(scores, labels) == 1.0


def test_auroc_inverted_labels():
    scores = [0.1, 0.2, 0.9, 0.8]
    labels = [1, 1, 0, 0]
    assert auroc(scores, labels) == 0.0


def test_auroc_matches_pair_count_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(5, 50))
        scores = rng.choice([0.1, 0.25, 0.5, 0.7, 0.9], size=n)  # force ties
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            continue
        assert abs(auroc(scores, labels) - auroc_pair_count(scores, labels)) < 1e-12


def test_auroc_rank_invariance(rng):
    scores = rng.normal(size=40)
    labels = rng.integers(0, 2, size=40)
    labels[0], labels[1] = 0, 1
    base = auroc(scores, labels)
    assert abs(auroc(np.exp(scores), labels) - base) < 1e-12
    assert abs(auroc(3 * scores + 7, labels) - base) < 1e-12


def test_auroc_flip_symmetry_with_ties(rng):
    scores = rng.choice([0.2, 0.5, 0.8], size=30)
    labels = rng.integers(0, 2, size=30)
    labels[0], labels[1] = 0, 1
    assert abs(auroc(scores, labels) + auroc(scores, 1 - labels) - 1.0) < 1e-12


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.5, 0.6], [1, 1])


def test_ap_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_single_positive_ranked_last():
    n = 7
    scores = list(range(n, 0, -1)) + [0]
    labels = [0] * n + [1]
    assert abs(average_precision(scores, labels) - 1.0 / (n + 1)) < 1e-12


def test_ap_matches_threshold_sweep_oracle(rng):
    for _ in range(30):
        n = 40
        scores = rng.choice(np.linspace(0, 1, 9), size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            continue
        assert abs(average_precision(scores, labels) - ap_threshold_sweep(scores, labels)) < 1e-12


def test_ap_no_positives_undefined():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.5], [0])


def test_pro_perfect_prediction(rng):
    mask = np.zeros((12, 12), dtype=np.int64)
    mask[2:5, 2:5] = 1
    mask[8:11, 7:10] = 1
    pred = mask.astype(np.float64)
    for limit in (0.1, 0.3, 1.0):
        assert abs(pro_score([pred], [mask], fpr_limit=limit) - 1.0) < 1e-9


def test_pro_constant_map_is_diagonal():
    # a constant map yields the single curve point (FPR 1, overlap 1); the
    # interpolated curve is the diagonal, whose full integral is 0.5
    mask = np.zeros((10, 10), dtype=np.int64)
    mask[3:6, 3:6] = 1
    pred = np.full((10, 10), 0.5)
    assert abs(pro_score([pred], [mask], fpr_limit=1.0) - 0.5) < 1e-6


def test_pro_matches_sweep_oracle(rng):
    for trial in range(8):
        maps, masks = [], []
        for _ in range(2):
            amap = rng.choice(np.linspace(0, 1, 7), size=(16, 16))
            mask = (rng.random((16, 16)) < 0.2).astype(np.int64)
            maps.append(amap)
            masks.append(mask)
        if not any(m.sum() for m in masks):
            continue
        for limit in (0.3, 0.7):
            got = pro_score(maps, masks, fpr_limit=limit)
            expected = pro_sweep(maps, masks, limit)
            assert abs(got - expected) < 1e-6


def test_pro_no_region_undefined():
    with pytest.raises(UndefinedMetricError):
        pro_score([np.zeros((4, 4))], [np.zeros((4, 4), dtype=np.int64)])


def test_pro_connectivity_choice():
    # diagonal bridge: one 3-pixel region under 8-connectivity, a 2-pixel
    # and a 1-pixel region under 4-connectivity
    mask = np.zeros((6, 6), dtype=np.int64)
    mask[2, 2] = mask[2, 3] = mask[3, 4] = 1
    pred = np.zeros((6, 6))
    pred[2, 2] = 1.0
    eight = pro_score([pred], [mask], fpr_limit=1.0, connectivity=8)
    four = pro_score([pred], [mask], fpr_limit=1.0, connectivity=4)
    assert abs(eight - (1 / 3 + 1) / 2) < 1e-9
    assert abs(four - (1 / 4 + 1) / 2) < 1e-9


def test_evaluate_matches_standalone_ops(rng):
    n = 12
    scores = rng.normal(size=n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    maps, masks = [], []
    for i in range(n):
        amap = rng.random((8, 8))
        mask = np.zeros((8, 8), dtype=np.int64)
        if labels[i]:
            mask[2:5, 2:5] = 1
        maps.append(amap)
        masks.append(mask)
    report = evaluate(scores, labels, maps, masks, fpr_limit=0.3)
    pixel_scores = np.concatenate([m.ravel() for m in maps])
    pixel_labels = np.concatenate([m.ravel() for m in masks])
    assert report.image_auroc == auroc(scores, labels)
    assert report.pixel_auroc == auroc(pixel_scores, pixel_labels)
    assert report.ap == average_precision(pixel_scores, pixel_labels)
    assert report.pro == pro_score(maps, masks, 0.3)
    assert report.counts["image_positives"] == int(labels.sum())
    assert report.counts["pixel_positives"] == int(pixel_labels.sum())
    assert 0 <= report.pro <= 1 and 0 <= report.ap <= 1


def test_evaluate_disjoint_ranges_give_one(rng):
    labels = np.array([0] * 5 + [1] * 5)
    scores = np.concatenate([rng.random(5), rng.random(5) + 10])
    maps = [np.full((4, 4), s) for s in scores]
    masks = [np.zeros((4, 4), dtype=np.int64) for _ in range(5)]
    anom_mask = np.zeros((4, 4), dtype=np.int64)
    anom_mask[1:3, 1:3] = 1
    masks += [anom_mask.copy() for _ in range(5)]
    report = evaluate(scores, labels, maps, masks)
    assert report.image_auroc == 1.0


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError, match="no samples"):
        evaluate([], [], [], [])


def test_metrics_order_invariance(rng):
    n = 20
    scores = rng.normal(size=n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 0, 1
    base = auroc(scores, labels)
    perm = rng.permutation(n)
    assert auroc(scores[perm], labels[perm]) == base
