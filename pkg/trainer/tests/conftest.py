import numpy as np
import pytest
from PIL import Image

from cpr_trainer import TrainerConfig


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def make_image(rng, base, size=64):
    """Shared base pattern + per-image noise + one structural blob."""
    arr = base + rng.normal(0, 12, size=(size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    blob = (np.hypot(yy - cy, xx - cx) < size // 6)[:, :, None] * rng.uniform(-40, 40)
    return np.clip(arr + blob, 0, 255).astype(np.uint8)


def write_image_dir(tmp_path, n=10, seed=0, size=64):
    rng = np.random.default_rng(seed)
    base = rng.random((size, size, 3)) * 120 + 60
    img_dir = tmp_path / "images"
    img_dir.mkdir()
    for i in range(n):
        Image.fromarray(make_image(rng, base, size)).save(img_dir / f"img{i:02d}.png")
    return img_dir, base


def smoke_config(**overrides) -> TrainerConfig:
    base = dict(
        backbone={"name": "tiny"},
        iterations=50,
        batch_size=1,
        gamma=96,
        out_dim=16,
        theta=3.0,
        lr=5e-3,
        defect_refresh_epochs=100,
        seed=0,
    )
    base.update(overrides)
    return TrainerConfig(**base)
