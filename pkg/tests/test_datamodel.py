import logging
import shutil

import numpy as np
import pytest

from datamodel import (
    DTYPE_F32,
    FORMAT_VERSION,
    MAGIC,
    dataset_fingerprint,
    load_cloud,
    load_embeddings,
    load_landmarks,
    load_manifest,
    load_prompt_embeddings,
    load_tensor,
    parse_manifest,
    require_valid,
    save_tensor,
    validate_dataset,
)
from errors import (
    BadMagic,
    CategorySetMismatch,
    DataError,
    DimMismatch,
    IoError,
    NonFinitePayload,
    TruncatedFile,
    UnknownObject,
)
from numkit import l2_normalize_rows


def _raw_file(path, shape, payload: bytes):
    header = (
        MAGIC
        + bytes([FORMAT_VERSION, DTYPE_F32, 0, 0])
        + np.array([len(shape)], dtype="<u4").tobytes()
        + np.array(shape, dtype="<u8").tobytes()
    )
    path.write_bytes(header + payload)
    return path


def test_tensor_round_trip_is_bit_exact(tmp_path, rng):
    arr = rng.normal(size=(5, 7)).astype(np.float32)
    save_tensor(arr, tmp_path / "a.emb")
    back = load_tensor(tmp_path / "a.emb")
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), arr.view(np.uint32))


def test_save_rejects_bad_payloads(tmp_path):
    with pytest.raises(NonFinitePayload):
        save_tensor(np.array([[1.0, np.inf]]), tmp_path / "x.emb")
    with pytest.raises(DimMismatch):
        save_tensor(np.zeros((0, 3)), tmp_path / "x.emb")


def test_load_bad_magic(tmp_path):
    (tmp_path / "bad.emb").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(BadMagic):
        load_tensor(tmp_path / "bad.emb")


def test_load_truncated_payload(tmp_path):
    path = _raw_file(tmp_path / "t.emb", (2, 3), np.zeros(5, dtype="<f4").tobytes())
    with pytest.raises(TruncatedFile):
        load_tensor(path)


def test_load_truncated_header(tmp_path):
    (tmp_path / "h.emb").write_bytes(MAGIC + bytes([1, 1]))
    with pytest.raises(TruncatedFile):
        load_tensor(tmp_path / "h.emb")


def test_load_trailing_bytes(tmp_path):
    path = _raw_file(tmp_path / "t.emb", (2, 3), np.zeros(7, dtype="<f4").tobytes())
    with pytest.raises(DimMismatch):
        load_tensor(path)


def test_load_non_finite(tmp_path):
    path = _raw_file(tmp_path / "n.emb", (1, 2), np.array([1.0, np.nan], dtype="<f4").tobytes())
    with pytest.raises(NonFinitePayload):
        load_tensor(path)


def test_load_missing_file(tmp_path):
    with pytest.raises(IoError):
        load_tensor(tmp_path / "missing.emb")


def test_load_embeddings_renormalizes_with_warning(tmp_path, caplog):
    save_tensor(np.array([[2.0, 0.0], [0.0, 0.5]]), tmp_path / "e.emb")
    with caplog.at_level(logging.WARNING):
        e = load_embeddings(tmp_path / "e.emb")
    assert np.linalg.norm(e, axis=1) == pytest.approx([1.0, 1.0])
    assert e.dtype == np.float64
    assert any("归一化" in r.getMessage() for r in caplog.records)


def test_load_cloud_normalizes_and_needs_eight_points(tmp_path, rng):
    save_tensor(rng.normal(size=(20, 3)) * 5 + 3, tmp_path / "c.emb")
    cloud = load_cloud(tmp_path / "c.emb")
    assert cloud.mean(axis=0) == pytest.approx(np.zeros(3), abs=1e-12)
    assert np.max(np.linalg.norm(cloud, axis=1)) == pytest.approx(1.0)

    save_tensor(rng.normal(size=(7, 3)), tmp_path / "small.emb")
    with pytest.raises(DimMismatch):
        load_cloud(tmp_path / "small.emb")


def test_manifest_loads_from_directory(dataset_dir, manifest):
    assert load_manifest(dataset_dir / "manifest.json").to_dict() == manifest.to_dict()
    assert manifest.category_ids == ["cat00", "cat01", "cat02"]
    assert len(manifest.objects) == 18
    assert {o.split for o in manifest.objects} == {"train", "test"}
    with pytest.raises(UnknownObject):
        manifest.object("nope")


def test_validate_dataset_passes_on_generated_data(manifest):
    report = validate_dataset(manifest)
    assert report.ok
    assert report.checked == 18


def test_validate_dataset_reports_bad_object(dataset_dir, tmp_path):
    copy = tmp_path / "copy"
    shutil.copytree(dataset_dir, copy)
    save_tensor(np.ones((2, 16)), copy / "views" / "c01_0002.emb")
    manifest = load_manifest(copy)
    report = validate_dataset(manifest)
    assert not report.ok
    assert [v.object_id for v in report.violations] == ["c01_0002"]
    with pytest.raises(DataError):
        require_valid(manifest)


def test_landmarks_and_prompts(manifest):
    landmarks = load_landmarks(manifest)
    assert sorted(landmarks) == manifest.category_ids
    assert landmarks["cat00"].L == 4
    names, prompts = load_prompt_embeddings(manifest)
    assert names == manifest.category_ids
    assert prompts.shape == (3, 16)


def test_fingerprint_tracks_file_contents(dataset_dir, manifest, tmp_path):
    assert dataset_fingerprint(manifest) == dataset_fingerprint(load_manifest(dataset_dir))
    copy = tmp_path / "copy"
    shutil.copytree(dataset_dir, copy)
    save_tensor(np.zeros((32, 3)) + np.arange(3), copy / "clouds" / "c00_0000.emb")
    assert dataset_fingerprint(load_manifest(copy)) != dataset_fingerprint(manifest)


def test_load_header_with_huge_dims(tmp_path):
    # the element count overflows 64-bit integers
    path = _raw_file(tmp_path / "big.emb", (2**40, 2**40), np.zeros(4, dtype="<f4").tobytes())
    with pytest.raises(TruncatedFile):
        load_tensor(path)


def _handmade_objects(rng, per_category=3):
    return {
        f"{cat}_{i}": (cat, l2_normalize_rows(rng.normal(size=(2, 8))), rng.normal(size=(16, 3)))
        for cat in ("a", "b")
        for i in range(per_category)
    }


def test_missing_prompt_is_a_category_mismatch(make_dataset, rng):
    manifest = make_dataset(_handmade_objects(rng))
    with pytest.raises(CategorySetMismatch) as info:
        load_prompt_embeddings(manifest)
    assert info.value.exit_code == 2


def test_manifest_without_splits_is_one_split(make_dataset, rng):
    manifest = make_dataset(_handmade_objects(rng))
    assert not manifest.declares_splits
    assert all(o.split is None for o in manifest.objects)
    everything = [o.id for o in manifest.objects]
    assert [o.id for o in manifest.split_objects("train")] == everything
    assert [o.id for o in manifest.split_objects("test")] == everything
    assert "split" not in manifest.to_dict()["objects"][0]


def test_unmarked_objects_train_once_splits_exist(manifest):
    raw = manifest.to_dict()
    raw["objects"][0].pop("split")
    partial = parse_manifest(raw, root=manifest.root)
    assert partial.declares_splits
    assert raw["objects"][0]["id"] in [o.id for o in partial.split_objects("train")]
    assert raw["objects"][0]["id"] not in [o.id for o in partial.split_objects("test")]
