import numpy as np
import pytest

from cpr_trainer.tensor_files import read_tensor, write_manifest, write_tensor


def test_round_trip(tmp_path, rng):
    data = rng.normal(size=(5, 4, 3)).astype(np.float32)
    path = tmp_path / "t.cprt"
    write_tensor(data, 2, path)
    back, scale = read_tensor(path)
    assert np.array_equal(back, data)
    assert scale == 2


def test_rejects_nan(tmp_path):
    data = np.full((2, 2, 2), np.nan, dtype=np.float32)
    with pytest.raises(ValueError, match="NaN"):
        write_tensor(data, 1, tmp_path / "t.cprt")


def test_file_loads_in_engine(tmp_path, rng):
    import cpr

    data = rng.normal(size=(6, 7, 8)).astype(np.float32)
    path = tmp_path / "t.cprt"
    write_tensor(data, 1, path)
    tensor = cpr.read_tensor(path)
    assert np.array_equal(tensor.data, data)
    assert tensor.scale_id == 1


def test_manifest_loads_in_engine(tmp_path, rng):
    import cpr

    entries = []
    for i in range(3):
        for scale, shape in ((1, (4, 4, 3)), (2, (2, 2, 3))):
            write_tensor(
                rng.normal(size=shape).astype(np.float32), scale,
                tmp_path / f"i{i}_s{scale}.cprt",
            )
        entries.append(
            {
                "image_id": f"i{i}",
                "tensor_paths": {"1": f"i{i}_s1.cprt", "2": f"i{i}_s2.cprt"},
                "label": "normal",
            }
        )
    write_manifest(entries, tmp_path / "manifest.json")
    manifest = cpr.load_manifest(tmp_path / "manifest.json")
    assert len(manifest.entries) == 3
    assert manifest.shapes == {1: (4, 4, 3), 2: (2, 2, 3)}
