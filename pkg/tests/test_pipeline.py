import hashlib
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from cpr.errors import ModelBundleError
from cpr.local_retrieval import AnomalyMap, aggregate_scales
from cpr.pipeline import (
    CprConfig,
    build_model,
    image_score,
    infer,
    load_model,
    remove_reference,
    save_model,
)
from cpr.synth import SynthSpec, generate_dataset
from cpr.tensor_io import FeatureTensor, load_manifest, read_tensor, write_tensor
from oracles import full_bank_nn_scan


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    generate_dataset(SynthSpec(n_normal=6, n_anomalous=3, grid_h=16, grid_w=16, dim=8, seed=5), out)
    return out


@pytest.fixture(scope="module")
def small_model(small_dataset):
    manifest = load_manifest(small_dataset / "train_manifest.json")
    config = CprConfig(k_neighbors=3, top_t=32, seed=5)
    return build_model(manifest, config)


def _query(small_dataset, image_id):
    manifest = load_manifest(small_dataset / "manifest.json")
    entry = next(e for e in manifest.entries if e.image_id == image_id)
    return {s: read_tensor(p) for s, p in entry.tensor_paths.items()}


def test_image_score_hand_case():
    amap = AnomalyMap(values=np.array([[3.0, 1.0], [2.0, 0.0]], dtype=np.float32))
    assert image_score(amap, 2) == 5.0


def test_image_score_constant_map():
    amap = AnomalyMap(values=np.full((3, 4), 0.5, dtype=np.float32))
    assert abs(image_score(amap, 5) - 2.5) < 1e-6
    assert abs(image_score(amap, 100) - 6.0) < 1e-6


def test_image_score_full_sum(rng):
    values = rng.random((4, 4)).astype(np.float32)
    amap = AnomalyMap(values=values)
    assert abs(image_score(amap, 16) - float(values.sum())) < 1e-5


def test_build_cardinality(small_model):
    assert small_model.n_references == 6
    assert len(small_model.global_index) == 6
    for s in (1, 2):
        assert small_model.banks[s].n_references == 6
    assert small_model.feb is not None


def test_build_feb_disabled(small_dataset):
    manifest = load_manifest(small_dataset / "train_manifest.json")
    model = build_model(manifest, CprConfig(feb_enabled=False, seed=5))
    assert model.feb is None


def test_build_rejects_anomalous(small_dataset):
    manifest = load_manifest(small_dataset / "manifest.json")
    with pytest.raises(ValueError, match="normal-only"):
        build_model(manifest, CprConfig())


def test_rebuild_same_seed_byte_identical(small_dataset, tmp_path):
    manifest = load_manifest(small_dataset / "train_manifest.json")
    hashes = []
    for name in ("a.cprm", "b.cprm"):
        model = build_model(manifest, CprConfig(k_neighbors=3, seed=11))
        save_model(model, tmp_path / name)
        hashes.append(hashlib.sha256((tmp_path / name).read_bytes()).hexdigest())
    assert hashes[0] == hashes[1]


def test_infer_self_retrieval(small_dataset, small_model):
    query = _query(small_dataset, "norm_0002")
    result = infer(small_model, query)
    assert result.neighbor_ids[0] == 2
    assert result.anomaly_map.values.max() <= 1e-6


def test_infer_top_t_degenerate_cases(small_dataset, small_model):
    query = _query(small_dataset, "anom_0007")
    from dataclasses import replace

    base = infer(small_model, query)
    cfg1 = replace(small_model.config, top_t=1)
    from cpr.pipeline import CprModel

    m1 = CprModel(
        config=cfg1,
        codebook=small_model.codebook,
        global_index=small_model.global_index,
        banks=small_model.banks,
        feb=small_model.feb,
    )
    r1 = infer(m1, query)
    assert abs(r1.image_score - float(base.anomaly_map.values.max())) < 1e-6

    h, w = base.anomaly_map.values.shape
    cfg_all = replace(small_model.config, top_t=h * w)
    m_all = CprModel(
        config=cfg_all,
        codebook=small_model.codebook,
        global_index=small_model.global_index,
        banks=small_model.banks,
        feb=small_model.feb,
    )
    r_all = infer(m_all, query)
    assert abs(r_all.image_score - float(base.anomaly_map.values.astype(np.float64).sum())) < 1e-4


def test_infer_score_recomputable(small_dataset, small_model):
    query = _query(small_dataset, "anom_0006")
    result = infer(small_model, query)
    assert result.image_score == image_score(result.anomaly_map, small_model.config.top_t)


def test_infer_missing_scale_rejected(small_dataset, small_model):
    query = _query(small_dataset, "norm_0001")
    del query[2]
    with pytest.raises(ValueError, match="missing scale"):
        infer(small_model, query)


def test_infer_unknown_scale_rejected(small_dataset, small_model, rng):
    query = _query(small_dataset, "norm_0001")
    query[3] = query[1]
    with pytest.raises(ValueError, match="no bank"):
        infer(small_model, query)


def test_infer_shape_mismatch_rejected(small_dataset, small_model, rng):
    query = _query(small_dataset, "norm_0001")
    query[1] = FeatureTensor(rng.normal(size=(8, 8, 8)).astype(np.float32))
    with pytest.raises(ValueError, match="shape"):
        infer(small_model, query)


def test_feb_off_path_is_aggregate(small_dataset):
    manifest = load_manifest(small_dataset / "train_manifest.json")
    model = build_model(manifest, CprConfig(k_neighbors=3, feb_enabled=False, seed=5))
    query = _query(small_dataset, "anom_0008")
    result = infer(model, query)
    h, w = model.banks[1].grid_shape[:2]
    agg = aggregate_scales([result.per_scale_maps[s] for s in model.scales], h, w)
    assert np.array_equal(result.anomaly_map.values, agg.values)


def test_save_load_round_trip(small_model, tmp_path):
    path = tmp_path / "m.cprm"
    save_model(small_model, path)
    loaded = load_model(path)
    assert loaded.config == small_model.config
    assert np.array_equal(loaded.codebook.centers, small_model.codebook.centers)
    assert np.array_equal(loaded.global_index.grids, small_model.global_index.grids)
    assert loaded.global_index.image_ids == small_model.global_index.image_ids
    for s in small_model.scales:
        assert np.array_equal(loaded.banks[s].stack, small_model.banks[s].stack)
        assert loaded.banks[s].normalized == small_model.banks[s].normalized
    assert np.array_equal(loaded.feb[1], small_model.feb[1])
    assert np.array_equal(loaded.feb[0].weights, small_model.feb[0].weights)
    assert loaded.feb[0].bias == small_model.feb[0].bias


def test_corrupt_bundle_detected(small_model, tmp_path):
    path = tmp_path / "m.cprm"
    save_model(small_model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(raw)
    with pytest.raises(ModelBundleError, match="checksum"):
        load_model(path)


def test_newer_bundle_version_rejected(small_model, tmp_path):
    import zlib

    path = tmp_path / "m.cprm"
    save_model(small_model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = np.uint32(99).tobytes()
    blob = bytes(raw[:-4])
    path.write_bytes(blob + np.uint32(zlib.crc32(blob) & 0xFFFFFFFF).tobytes())
    with pytest.raises(ModelBundleError, match="version"):
        load_model(path)


def test_determinism_across_thread_counts(small_dataset, small_model):
    manifest = load_manifest(small_dataset / "manifest.json")
    queries = [
        {s: read_tensor(p) for s, p in e.tensor_paths.items()} for e in manifest.entries
    ]

    def run_serial():
        return [infer(small_model, q) for q in queries]

    def run_parallel(workers):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda q: infer(small_model, q), queries))

    base = run_serial()
    for results in (run_parallel(2), run_parallel(4)):
        for a, b in zip(base, results):
            assert a.image_score == b.image_score
            assert np.array_equal(a.anomaly_map.values, b.anomaly_map.values)
            assert a.neighbor_ids == b.neighbor_ids


def test_remove_unretrieved_reference_is_noop(small_dataset, small_model):
    query = _query(small_dataset, "anom_0006")
    base = infer(small_model, query)
    unused = [
        i for i in range(small_model.n_references) if i not in base.neighbor_ids
    ]
    assert unused, "test requires a reference outside the top-k"
    # removing trailing unused references keeps earlier indices stable
    victim = max(unused)
    pruned = remove_reference(small_model, victim)
    shifted = infer(pruned, query)
    assert shifted.image_score == base.image_score
    assert np.array_equal(shifted.anomaly_map.values, base.anomaly_map.values)
    base_ids = [small_model.global_index.image_ids[i] for i in base.neighbor_ids]
    new_ids = [pruned.global_index.image_ids[i] for i in shifted.neighbor_ids]
    assert new_ids == base_ids


def test_cascade_degeneracy_small(rng, tmp_path):
    # K = N_R, full-grid window, no foreground, single scale: the cascade
    # must equal unconstrained nearest-neighbor search over the whole bank
    n, h, w, c = 4, 6, 6, 4
    tensors = [rng.normal(size=(h, w, c)).astype(np.float32) for _ in range(n)]
    entries = []
    for i, data in enumerate(tensors):
        rel = f"r{i}.cprt"
        write_tensor(FeatureTensor(data, scale_id=1), tmp_path / rel)
        entries.append({"image_id": f"r{i}", "tensor_paths": {"1": rel}, "label": "normal"})
    (tmp_path / "m.json").write_text(json.dumps({"entries": entries}))
    manifest = load_manifest(tmp_path / "m.json")
    config = CprConfig(
        k_neighbors=n,
        grid_s=2,
        n_clusters=3,
        tau=0,
        top_t=4,
        windows={1: 2 * h - 1},
        feb_enabled=False,
        seed=0,
    )
    model = build_model(manifest, config)
    query = FeatureTensor(rng.normal(size=(h, w, c)).astype(np.float32), scale_id=1)
    result = infer(model, {1: query})
    expected = full_bank_nn_scan(query.data, np.stack(tensors))
    assert np.abs(result.anomaly_map.values - expected).max() < 1e-6
