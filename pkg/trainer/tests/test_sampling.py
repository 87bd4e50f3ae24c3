import numpy as np
import pytest
import torch

from cpr_trainer.sampling import FeaturePair, apply_weights, pair_weight, sample_pairs


def _grids(rng, h=8, w=8, c=6):
    q = torch.from_numpy(rng.normal(size=(h, w, c)).astype(np.float32))
    r = torch.from_numpy(rng.normal(size=(h, w, c)).astype(np.float32))
    return q, r


def _mask(h=8, w=8):
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    return mask


def test_gamma_three_gives_one_of_each(rng):
    q, r = _grids(rng)
    pairs = sample_pairs(q, r, _mask(), gamma=3, theta=2.0, rng=rng)
    assert [p.kind for p in pairs] == ["positive", "remote", "anomalous"]
    assert [p.label for p in pairs] == [1, 0, 0]


def test_positive_pairs_on_clean_cells_same_coords(rng):
    q, r = _grids(rng)
    mask = _mask()
    for _ in range(20):
        pairs = sample_pairs(q, r, mask, gamma=30, theta=2.0, rng=rng)
        for p in pairs:
            r_q, c_q, r_r, c_r = p.coords
            if p.kind == "positive":
                assert (r_q, c_q) == (r_r, c_r)
                assert mask[r_q, c_q] == 0
            if p.kind == "anomalous":
                assert (r_q, c_q) == (r_r, c_r)
                assert mask[r_q, c_q] == 1


def test_remote_distances_exceed_theta(rng):
    q, r = _grids(rng, 10, 10)
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[5, 5] = 1
    theta = 3.0
    count = 0
    while count < 10_000:
        pairs = sample_pairs(q, r, mask, gamma=300, theta=theta, rng=rng)
        for p in pairs:
            if p.kind == "remote":
                r_q, c_q, r_r, c_r = p.coords
                assert np.hypot(r_q - r_r, c_q - c_r) > theta
                count += 1


def test_vectors_unit_normalized(rng):
    q, r = _grids(rng)
    pairs = sample_pairs(q, r, _mask(), gamma=30, theta=2.0, rng=rng)
    for p in pairs:
        assert abs(float(p.query_vec.norm()) - 1.0) < 1e-5
        assert abs(float(p.ref_vec.norm()) - 1.0) < 1e-5


def test_gamma_must_be_multiple_of_three(rng):
    q, r = _grids(rng)
    with pytest.raises(ValueError, match="multiple of 3"):
        sample_pairs(q, r, _mask(), gamma=4, theta=2.0, rng=rng)


def test_degenerate_masks_rejected(rng):
    q, r = _grids(rng)
    with pytest.raises(ValueError, match="clean and defective"):
        sample_pairs(q, r, np.zeros((8, 8), dtype=np.uint8), gamma=3, theta=2.0, rng=rng)
    with pytest.raises(ValueError, match="clean and defective"):
        sample_pairs(q, r, np.ones((8, 8), dtype=np.uint8), gamma=3, theta=2.0, rng=rng)


def test_pair_kind_label_consistency():
    v = torch.ones(4) / 2.0
    with pytest.raises(ValueError, match="label 1"):
        FeaturePair(v, v, label=0, kind="positive", coords=(0, 0, 0, 0))
    with pytest.raises(ValueError, match="label 0"):
        FeaturePair(v, v, label=1, kind="remote", coords=(0, 0, 1, 1))


def _pair(kind, coords):
    v = torch.ones(3) / np.sqrt(3.0)
    return FeaturePair(v, v, label=1 if kind == "positive" else 0, kind=kind, coords=coords)


def test_pair_weight_positive_is_one(rng):
    raw = rng.normal(size=(8, 8, 5)).astype(np.float32)
    assert pair_weight(_pair("positive", (1, 1, 1, 1)), raw, raw, 2.0, (8, 8)) == 1.0
    assert pair_weight(_pair("anomalous", (2, 2, 2, 2)), raw, raw, 2.0, (8, 8)) == 1.0


def test_pair_weight_remote_identical_vectors_is_zero(rng):
    raw = rng.normal(size=(8, 8, 5)).astype(np.float32)
    raw[1, 1] = raw[5, 5]
    w = pair_weight(_pair("remote", (1, 1, 5, 5)), raw, raw, 2.0, (8, 8))
    assert w == 0.0


def test_pair_weight_remote_at_delta_is_one(rng):
    raw_q = np.zeros((8, 8, 4), dtype=np.float32)
    raw_r = np.zeros((8, 8, 4), dtype=np.float32)
    raw_q[2, 3] = [3.0, 0, 0, 0]
    raw_r[6, 7] = [0, 4.0, 0, 0]  # distance 5
    w = pair_weight(_pair("remote", (2, 3, 6, 7)), raw_q, raw_r, 5.0, (8, 8))
    assert abs(w - 1.0) < 1e-6


def test_pair_weight_delta_must_be_positive(rng):
    raw = rng.normal(size=(8, 8, 4)).astype(np.float32)
    with pytest.raises(ValueError, match="delta"):
        pair_weight(_pair("remote", (1, 1, 5, 5)), raw, raw, 0.0, (8, 8))


def test_apply_weights_matches_pair_weight(rng):
    q, r = _grids(rng)
    raw_q = rng.normal(size=(8, 8, 5)).astype(np.float32)
    raw_r = rng.normal(size=(8, 8, 5)).astype(np.float32)
    pairs = sample_pairs(q, r, _mask(), gamma=30, theta=2.0, rng=rng)
    apply_weights(pairs, raw_q, raw_r, 1.7, (8, 8))
    for p in pairs:
        expected = pair_weight(p, raw_q, raw_r, 1.7, (8, 8))
        assert abs(p.weight - expected) < 1e-9
        if p.kind != "remote":
            assert p.weight == 1.0


def test_pair_weight_resizes_raw_to_grid(rng):
    # raw at 16x16, metric grid at 8x8: weights must use the resized raw
    raw = rng.normal(size=(16, 16, 4)).astype(np.float32)
    w = pair_weight(_pair("remote", (0, 0, 7, 7)), raw, raw, 1.0, (8, 8))
    assert w >= 0.0
