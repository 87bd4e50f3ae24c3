import numpy as np
import pytest

from cpr_trainer.backbone import (
    ConfigurationError,
    build_backbone,
    extract_features,
)


@pytest.fixture(scope="module")
def densenet():
    return build_backbone({"name": "densenet201", "seed": 0})


def test_densenet_two_scale_shapes(densenet, rng):
    img = (rng.random((400, 300, 3)) * 255).astype(np.uint8)
    feats = extract_features(img, densenet)
    assert feats[1].shape == (80, 80, 256)
    assert feats[2].shape == (40, 40, 512)
    for f in feats.values():
        assert f.dtype == np.float32
        assert np.isfinite(f).all()


def test_densenet_deterministic_eval(densenet, rng):
    img = (rng.random((320, 320, 3)) * 255).astype(np.uint8)
    a = extract_features(img, densenet)
    b = extract_features(img, densenet)
    for s in a:
        assert np.array_equal(a[s], b[s])


def test_tiny_backbone_shapes(rng):
    bb = build_backbone({"name": "tiny", "seed": 0})
    img = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
    feats = extract_features(img, bb)
    assert feats[1].shape == (16, 16, 24)
    assert feats[2].shape == (8, 8, 32)


def test_backbone_frozen(densenet):
    assert all(not p.requires_grad for p in densenet.parameters())


def test_unknown_backbone_rejected():
    with pytest.raises(ConfigurationError, match="unknown backbone"):
        build_backbone({"name": "resnet999"})


def test_export_loads_in_engine(tmp_path, rng):
    import cpr

    from cpr_trainer.tensor_files import write_tensor

    bb = build_backbone({"name": "tiny", "seed": 0})
    img = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
    feats = extract_features(img, bb)
    for s, grid in feats.items():
        write_tensor(grid, s, tmp_path / f"f{s}.cprt")
        loaded = cpr.read_tensor(tmp_path / f"f{s}.cprt")
        assert np.array_equal(loaded.data, grid)
        assert loaded.scale_id == s
