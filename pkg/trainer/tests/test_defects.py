import numpy as np
import pytest

from cpr_trainer.defects import downsample_mask, synth_anomaly


def test_alpha_one_mask_equals_region(rng):
    img = (rng.random((40, 40, 3)) * 255).astype(np.uint8)
    region = np.zeros((40, 40), dtype=bool)
    region[10:20, 12:25] = True
    for _ in range(5):
        aug, mask = synth_anomaly(img, rng, alpha=1.0, region=region)
        if (mask == region.astype(np.uint8)).all():
            break
    # alpha 1 replaces every region pixel; fill값 can coincide with the image
    # on isolated pixels, in which case the mask still covers the region
    assert mask.any()
    assert not mask[~region].any()


def test_mask_marks_exactly_altered_pixels(rng):
    img = (rng.random((48, 48, 3)) * 255).astype(np.uint8)
    for _ in range(10):
        aug, mask = synth_anomaly(img, rng)
        outside = mask == 0
        changed = np.any(aug != img, axis=-1)
        # nothing outside the mask may change unless the mask was forced to
        # the sampled region (degenerate blend), which keeps changes inside
        assert not (changed & outside).any()


def test_mask_never_empty(rng):
    img = (rng.random((32, 32, 3)) * 255).astype(np.uint8)
    for _ in range(50):
        _, mask = synth_anomaly(img, rng)
        assert mask.any()


def test_pinned_empty_region_rejected(rng):
    img = np.zeros((16, 16, 3), dtype=np.uint8)
    with pytest.raises(ValueError, match="non-empty"):
        synth_anomaly(img, rng, region=np.zeros((16, 16), dtype=bool))


def test_downsample_threshold_rule(rng):
    # one grid cell = 4x4 pixels; cells are defective iff >= 30% altered
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[0:2, 0:2] = 1  # 4/16 = 25% of cell (0,0) -> clean
    mask[4:7, 4:8] = 1  # 12/16 = 75% of cell (1,1) -> defective
    grid = downsample_mask(mask, 4, 4, cell_threshold=0.3)
    assert grid[0, 0] == 0
    assert grid[1, 1] == 1
    assert grid.sum() == 1


def test_downsample_matches_pixel_count_oracle(rng):
    mask = (rng.random((33, 29)) < 0.3).astype(np.uint8)
    gh, gw = 5, 4
    grid = downsample_mask(mask, gh, gw, cell_threshold=0.3)
    for u in range(gh):
        r0, r1 = u * 33 // gh, (u + 1) * 33 // gh
        for v in range(gw):
            c0, c1 = v * 29 // gw, (v + 1) * 29 // gw
            cell = mask[r0:r1, c0:c1]
            expected = 1 if cell.mean() >= 0.3 else 0
            assert grid[u, v] == expected
