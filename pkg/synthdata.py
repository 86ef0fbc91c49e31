"""Deterministic synthetic datasets with planted category / subtype structure.

Feature space layout: a random orthonormal basis is split into a content
subspace (dimension F - T) and a texture subspace (dimension T). Category
centroids, subtype directions, per-view noise and landmarks all live in the
content subspace; each object's texture component lives in the texture
subspace, so it is orthogonal to every landmark.

Point clouds are surfaces of revolution about the up axis, so training
rotations about that axis leave their distribution unchanged. The category
fixes the profile family and the height step; the subtype fixes the taper.

Each generator concern draws from its own RngStream, so changing L only
changes the landmark files.
"""
import logging
import math
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from config import SynthConfig
from datamodel import MANIFEST_VERSION, normalize_cloud, save_tensor
from numkit import RngStream, l2_normalize, l2_normalize_rows
from utils import write_json

logger = logging.getLogger(__name__)

STREAM_BASIS, STREAM_CATEGORIES, STREAM_LANDMARKS, STREAM_OBJECTS, STREAM_CLOUDS, STREAM_SPLIT = 1, 2, 3, 4, 5, 6
SHAPE_FAMILIES = ("ellipsoid", "cylinder", "hourglass")
# half-height over radius, indexed by c // len(SHAPE_FAMILIES)
HEIGHT_LADDER = (0.45, 1.0, 2.2)
SUBTYPE_TAPER = 0.25


def category_id(c: int) -> str:
    return f"cat{c:02d}"


def object_id(c: int, m: int) -> str:
    return f"c{c:02d}_{m:04d}"


class FeatureSpace:
    """Orthonormal content / texture bases of the synthetic embedding space."""

    def __init__(self, cfg: SynthConfig) -> None:
        rng = RngStream(cfg.seed, STREAM_BASIS)
        F, T = cfg.feat_dim, cfg.texture_dim
        q, _ = np.linalg.qr(rng.normal(size=(F, F)))
        self.content = q[:, : F - T]
        self.texture = q[:, F - T :]

    def random_content(self, rng: RngStream) -> NDArray[np.float64]:
        return l2_normalize(self.content @ rng.normal(size=self.content.shape[1]))

    def random_texture(self, rng: RngStream, scale: float) -> NDArray[np.float64]:
        if self.texture.shape[1] == 0 or scale == 0.0:
            return np.zeros(self.content.shape[0])
        return scale * l2_normalize(self.texture @ rng.normal(size=self.texture.shape[1]))


def separation_margin(cfg: SynthConfig) -> float:
    """Positive margin guarantees every clean view is nearest its own centroid.

    Holds when centroids are orthonormal (C <= F - T): subtype plus noise can
    move a view by at most ``subtype_scale + view_noise`` and centroids sit
    sqrt(2) apart.
    """
    if cfg.categories > cfg.feat_dim - cfg.texture_dim:
        return -math.inf
    return 1.0 - math.sqrt(2.0) * (cfg.subtype_scale + cfg.view_noise)


def build_views(content: NDArray, texture: NDArray) -> NDArray[np.float64]:
    """Final view embeddings: the texture component is added before normalization."""
    return l2_normalize_rows(np.asarray(content) + np.asarray(texture)[None, :])


def _centroids(space: FeatureSpace, cfg: SynthConfig, rng: RngStream) -> NDArray[np.float64]:
    if cfg.categories <= space.content.shape[1]:
        return space.content[:, : cfg.categories].T.copy()
    return np.stack([space.random_content(rng) for _ in range(cfg.categories)])


def _landmarks(space, cfg, centroid, subtypes, rng: RngStream) -> NDArray[np.float64]:
    rows = []
    for l in range(cfg.landmarks):
        weight = rng.uniform(0.5, 1.5)
        noise = cfg.landmark_noise * space.random_content(rng)
        rows.append(centroid + weight * subtypes[l % cfg.subtypes] + noise)
    return l2_normalize_rows(np.stack(rows))


def _profile(family: str, h: NDArray) -> NDArray:
    """Radius of the surface of revolution at normalized height ``h`` in [-1, 1]."""
    if family == "ellipsoid":
        return np.sqrt(np.clip(1.0 - h * h, 0.0, None))
    if family == "hourglass":
        return 0.5 + 0.5 * h * h
    return np.ones_like(h)


def _sample_surface(family: str, height: float, taper: float, n: int, rng: RngStream) -> NDArray[np.float64]:
    """Points on a surface of revolution about the up (y) axis.

    ``height`` is the half-height relative to a unit radius and ``taper``
    widens the top against the bottom. Capped families put a fifth of the
    points on the end discs.
    """
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    h = rng.uniform(-1.0, 1.0, size=n)
    scale = np.ones(n)
    if family != "ellipsoid":
        cap = rng.uniform(size=n) < 0.2
        h[cap] = np.where(rng.uniform(size=int(cap.sum())) < 0.5, -1.0, 1.0)
        scale[cap] = np.sqrt(rng.uniform(size=int(cap.sum())))
    radial = scale * _profile(family, h) * (1.0 + taper * h)
    return np.stack([radial * np.cos(theta), height * h, radial * np.sin(theta)], axis=1)


def _subtype_tapers(subtypes: int) -> NDArray[np.float64]:
    if subtypes == 1:
        return np.zeros(1)
    return np.linspace(-SUBTYPE_TAPER, SUBTYPE_TAPER, subtypes)


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write manifest, views, clouds, landmarks and prompt embeddings; return the manifest path."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    space = FeatureSpace(cfg)
    rng_cat = RngStream(cfg.seed, STREAM_CATEGORIES)
    rng_lm = RngStream(cfg.seed, STREAM_LANDMARKS)
    rng_obj = RngStream(cfg.seed, STREAM_OBJECTS)
    rng_cloud = RngStream(cfg.seed, STREAM_CLOUDS)
    rng_split = RngStream(cfg.seed, STREAM_SPLIT)

    logger.info(
        "生成合成数据：C=%d, K=%d, M=%d, R=%d, F=%d, L=%d, P=%d, T=%d, seed=%d",
        cfg.categories, cfg.subtypes, cfg.per_category, cfg.views, cfg.feat_dim,
        cfg.landmarks, cfg.points, cfg.texture_dim, cfg.seed,
    )
    centroids = _centroids(space, cfg, rng_cat)
    categories, objects = [], []
    n_test = int(round(cfg.test_fraction * cfg.per_category))

    for c in range(cfg.categories):
        cid = category_id(c)
        subtypes = np.stack([cfg.subtype_scale * space.random_content(rng_cat) for _ in range(cfg.subtypes)])
        family = SHAPE_FAMILIES[c % len(SHAPE_FAMILIES)]
        height = HEIGHT_LADDER[(c // len(SHAPE_FAMILIES)) % len(HEIGHT_LADDER)] * rng_cloud.uniform(0.95, 1.05)
        tapers = _subtype_tapers(cfg.subtypes)

        save_tensor(_landmarks(space, cfg, centroids[c], subtypes, rng_lm), out / "landmarks" / f"{cid}.emb")
        save_tensor(centroids[c][None, :], out / "prompts" / f"{cid}.emb")
        categories.append(
            {"id": cid, "landmark_file": f"landmarks/{cid}.emb", "prompt_embedding_file": f"prompts/{cid}.emb"}
        )

        test_members = set(rng_split.permutation(cfg.per_category)[:n_test].tolist())
        for m in range(cfg.per_category):
            oid = object_id(c, m)
            k = m % cfg.subtypes
            content = np.stack(
                [centroids[c] + subtypes[k] + cfg.view_noise * space.random_content(rng_obj) for _ in range(cfg.views)]
            )
            views = build_views(content, space.random_texture(rng_obj, cfg.texture_scale))
            jitter = 1.0 + 0.03 * rng_cloud.normal(size=2)
            cloud = _sample_surface(family, height * jitter[0], tapers[k] * jitter[1], cfg.points, rng_cloud)
            cloud = normalize_cloud(cloud + rng_cloud.normal(cfg.cloud_noise, size=cloud.shape))

            save_tensor(views, out / "views" / f"{oid}.emb")
            save_tensor(cloud, out / "clouds" / f"{oid}.emb")
            objects.append(
                {
                    "id": oid,
                    "category": cid,
                    "views_file": f"views/{oid}.emb",
                    "cloud_file": f"clouds/{oid}.emb",
                    "split": "test" if m in test_members else "train",
                }
            )

    manifest_path = out / "manifest.json"
    write_json(
        manifest_path,
        {
            "version": MANIFEST_VERSION,
            "feat_dim": cfg.feat_dim,
            "views_per_object": cfg.views,
            "categories": categories,
            "objects": objects,
        },
    )
    write_json(out / "synth_config.json", cfg.to_dict())
    logger.info("合成数据已写入 %s：%d 个对象", out, len(objects))
    return manifest_path


def texture_twins(cfg: SynthConfig) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Two objects with identical per-view content and different, equal-norm textures.

    Returns ``(views_a, views_b, content, landmarks)``; ``content`` is the
    shared pre-texture construction and ``landmarks`` the category's landmark
    matrix.
    """
    cfg.validate()
    space = FeatureSpace(cfg)
    rng = RngStream(cfg.seed, 99)
    centroid = _centroids(space, cfg, rng)[0]
    subtypes = np.stack([cfg.subtype_scale * space.random_content(rng) for _ in range(cfg.subtypes)])
    landmarks = _landmarks(space, cfg, centroid, subtypes, rng)
    content = np.stack([centroid + subtypes[0] + cfg.view_noise * space.random_content(rng) for _ in range(cfg.views)])
    views_a = build_views(content, space.random_texture(rng, cfg.texture_scale))
    views_b = build_views(content, space.random_texture(rng, cfg.texture_scale))
    return views_a, views_b, content, landmarks
