import numpy as np
import pytest

from config import SynthConfig
from datamodel import load_manifest, load_object_cloud, load_prompt_embeddings, load_views
from errors import ConfigInvalid
from evaluation import zero_shot_from_embeddings
from similarity import ViewSet, i2i_similarity
from synthdata import HEIGHT_LADDER, SHAPE_FAMILIES, FeatureSpace, generate, separation_margin, texture_twins
from utils import sha256_file

from conftest import small_synth_config


def _digests(root):
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_same_bytes(tmp_path, dataset_dir):
    generate(small_synth_config(), tmp_path / "again")
    assert _digests(tmp_path / "again") == _digests(dataset_dir)


def test_landmark_count_only_touches_landmark_files(tmp_path, dataset_dir):
    generate(small_synth_config(landmarks=6), tmp_path / "more")
    a, b = _digests(dataset_dir), _digests(tmp_path / "more")
    changed = {k for k in a if a[k] != b[k]}
    assert changed
    assert all(k.startswith("landmarks/") or k == "synth_config.json" for k in changed)


def test_splits_per_category(manifest):
    for cat, objs in manifest.objects_by_category().items():
        assert sum(o.split == "test" for o in objs) == 1, cat


def test_texture_is_orthogonal_to_landmarks():
    cfg = small_synth_config()
    _, _, _, landmarks = texture_twins(cfg)
    space = FeatureSpace(cfg)
    assert np.max(np.abs(landmarks @ space.texture)) < 1e-12
    assert np.max(np.abs(space.content.T @ space.texture)) < 1e-12


def test_clean_views_are_nearest_their_prompt(manifest):
    assert separation_margin(small_synth_config()) > 0
    names, prompts = load_prompt_embeddings(manifest)
    views = np.stack([load_views(manifest, o)[0] for o in manifest.objects])
    labels = [o.category for o in manifest.objects]
    assert zero_shot_from_embeddings(views, labels, names, prompts).top1 == 1.0


def test_margin_is_unbounded_without_orthogonal_centroids():
    assert separation_margin(SynthConfig(categories=70, feat_dim=64, texture_dim=8)) == -np.inf


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        SynthConfig(feat_dim=10, landmarks=8, texture_dim=4).validate()
    with pytest.raises(ConfigInvalid):
        SynthConfig(points=4).validate()
    with pytest.raises(ConfigInvalid):
        SynthConfig.from_dict({"categories": 2, "colour": "red"})


def test_manifest_reload_matches(dataset_dir, manifest):
    assert load_manifest(dataset_dir / "manifest.json").objects == manifest.objects


def test_noise_free_subtype_mates_share_views(tmp_path):
    cfg = small_synth_config(view_noise=0.0, texture_scale=0.0)
    manifest = load_manifest(generate(cfg, tmp_path / "clean"))
    a, b = manifest.object("c01_0000"), manifest.object("c01_0002")
    va = ViewSet(a.id, a.category, load_views(manifest, a))
    vb = ViewSet(b.id, b.category, load_views(manifest, b))
    assert i2i_similarity(va, vb) == pytest.approx(1.0, abs=1e-6)


def test_height_ladder_separates_category_rungs(tmp_path):
    cfg = SynthConfig(
        categories=6, subtypes=2, per_category=4, views=2, feat_dim=16, landmarks=2, points=256, texture_dim=4, seed=3
    )
    manifest = load_manifest(generate(cfg, tmp_path / "shapes"))
    assert len(HEIGHT_LADDER) == len(SHAPE_FAMILIES) == 3
    for o in manifest.objects:
        cloud = load_object_cloud(manifest, o)
        # height over width is set by the category rung
        aspect = np.ptp(cloud[:, 1]) / max(np.ptp(cloud[:, 0]), np.ptp(cloud[:, 2]))
        rung = manifest.category_ids.index(o.category) // len(SHAPE_FAMILIES)
        if rung == 0:
            assert aspect < 0.6, o.id
        else:
            assert aspect > 0.6, o.id
