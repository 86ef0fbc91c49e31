import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config import SynthConfig, TrainConfig  # noqa: E402
from datamodel import MANIFEST_VERSION, load_landmarks, load_manifest, save_tensor  # noqa: E402
from numkit import l2_normalize_rows  # noqa: E402
from simstore import precompute  # noqa: E402
from synthdata import generate  # noqa: E402
from utils import write_json  # noqa: E402

# 测试期间不写日志文件
os.environ.setdefault("HN3D_LOG_FILE", "0")


def small_synth_config(**changes) -> SynthConfig:
    cfg = SynthConfig(
        categories=3, subtypes=2, per_category=6, views=3, feat_dim=16, landmarks=4, points=32, texture_dim=4, seed=7
    )
    return cfg.replace(**changes) if changes else cfg


def small_train_config(**changes) -> TrainConfig:
    cfg = TrainConfig(batch_size=6, epochs=2, base_lr=3e-3, hidden1=8, hidden2=16, seed=1)
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    generate(small_synth_config(), out)
    return out


@pytest.fixture(scope="session")
def manifest(dataset_dir):
    return load_manifest(dataset_dir)


@pytest.fixture(scope="session")
def stores(manifest):
    return {
        "i2i": precompute(manifest, "i2i"),
        "i2l2": precompute(manifest, "i2l2", load_landmarks(manifest)),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_dataset(tmp_path):
    """Write a hand-built dataset: ``objects`` maps id -> (category, views, cloud)."""

    def build(objects, landmarks=None, prompts=None, name="handmade"):
        root = tmp_path / name
        feat_dim = next(iter(objects.values()))[1].shape[1]
        views_per_object = next(iter(objects.values()))[1].shape[0]
        categories = []
        for cat in dict.fromkeys(c for c, _, _ in objects.values()):
            entry = {"id": cat}
            if landmarks and cat in landmarks:
                save_tensor(l2_normalize_rows(landmarks[cat]), root / "landmarks" / f"{cat}.emb")
                entry["landmark_file"] = f"landmarks/{cat}.emb"
            if prompts and cat in prompts:
                save_tensor(np.asarray(prompts[cat])[None, :], root / "prompts" / f"{cat}.emb")
                entry["prompt_embedding_file"] = f"prompts/{cat}.emb"
            categories.append(entry)
        entries = []
        for oid, (cat, views, cloud) in objects.items():
            save_tensor(views, root / "views" / f"{oid}.emb")
            save_tensor(cloud, root / "clouds" / f"{oid}.emb")
            entries.append(
                {"id": oid, "category": cat, "views_file": f"views/{oid}.emb", "cloud_file": f"clouds/{oid}.emb"}
            )
        write_json(
            root / "manifest.json",
            {
                "version": MANIFEST_VERSION,
                "feat_dim": feat_dim,
                "views_per_object": views_per_object,
                "categories": categories,
                "objects": entries,
            },
        )
        return load_manifest(root)

    return build
