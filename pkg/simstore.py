"""Per-category similarity precomputation, persistence and lookup.

Only same-category pairs are ever computed; any cross-category pair resolves
to the constant ``alpha``. Store directory layout::

    index.json          {"format", "kind", "alpha", "fingerprint",
                         "categories": {cat: {"file", "ids"}}}
    sim_0000.emb ...    one EMB1 |c| x |c| float32 matrix per category
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from datamodel import DatasetManifest, LandmarkSet, dataset_fingerprint, load_tensor, load_views, save_tensor
from errors import BadAlpha, ConfigInvalid, DataError, FingerprintMismatch, IoError, MissingLandmarks, UnknownObject
from similarity import DescriptorSet, ViewSet, build_descriptors, i2i_similarity, i2l2_similarity
from utils import read_json, write_json

logger = logging.getLogger(__name__)

STORE_KINDS = ("i2i", "i2l2")
STORE_FORMAT = 1
DEFAULT_ALPHA = 0.25


@dataclass(frozen=True)
class SimMatrix:
    category: str
    object_ids: tuple[str, ...]
    values: NDArray[np.float32]


@dataclass
class SimStore:
    kind: str
    alpha: float
    matrices: dict[str, SimMatrix]
    fingerprint: str
    _index: dict[str, tuple[str, int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in STORE_KINDS:
            raise ConfigInvalid(f"unknown store kind {self.kind!r}")
        _check_alpha(self.alpha)
        for cat, m in self.matrices.items():
            for pos, oid in enumerate(m.object_ids):
                if oid in self._index:
                    raise DataError(f"object {oid!r} appears in more than one category block")
                self._index[oid] = (cat, pos)

    def __contains__(self, object_id: str) -> bool:
        return object_id in self._index

    def lookup(self, id_a: str, id_b: str) -> float:
        try:
            cat_a, pos_a = self._index[id_a]
            cat_b, pos_b = self._index[id_b]
        except KeyError as e:
            raise UnknownObject(f"object {e.args[0]!r} not in {self.kind} store") from None
        if id_a == id_b:
            return 1.0
        if cat_a != cat_b:
            return float(self.alpha)
        return float(self.matrices[cat_a].values[pos_a, pos_b])

    def batch_sim(self, ids: list[str]) -> NDArray[np.float64]:
        """N x N similarity matrix for a batch, alpha on cross-category pairs."""
        n = len(ids)
        out = np.empty((n, n), dtype=np.float64)
        for i in range(n):
            out[i, i] = self.lookup(ids[i], ids[i])
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = self.lookup(ids[i], ids[j])
        return out


def lookup(store: SimStore, id_a: str, id_b: str) -> float:
    return store.lookup(id_a, id_b)


def _check_alpha(alpha: float) -> None:
    if not (0.0 < alpha <= 1.0):
        raise BadAlpha(f"alpha must be in (0, 1], got {alpha}")


def _category_block(
    kind: str, members: list[ViewSet], landmarks: LandmarkSet | None, pool: ThreadPoolExecutor | None
) -> NDArray[np.float32]:
    n = len(members)
    if kind == "i2l2":
        descs: list[DescriptorSet] = [build_descriptors(v, landmarks) for v in members]

        def score(i: int, j: int) -> float:
            return i2l2_similarity(descs[i], descs[j])
    else:

        def score(i: int, j: int) -> float:
            return i2i_similarity(members[i], members[j])

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    if pool is not None and len(pairs) > 1:
        values = list(pool.map(lambda ij: score(*ij), pairs))
    else:
        values = [score(i, j) for i, j in pairs]

    block = np.eye(n, dtype=np.float32)
    for (i, j), v in zip(pairs, values):
        block[i, j] = block[j, i] = np.float32(v)
    return block


def precompute(
    manifest: DatasetManifest,
    kind: str,
    landmarks: dict[str, LandmarkSet] | None = None,
    alpha: float = DEFAULT_ALPHA,
    threads: int = 1,
) -> SimStore:
    """Compute every same-category similarity once (i < j) and build a store."""
    if kind not in STORE_KINDS:
        raise ConfigInvalid(f"unknown similarity kind {kind!r}, expected one of {STORE_KINDS}")
    _check_alpha(alpha)
    groups = manifest.objects_by_category()
    if kind == "i2l2":
        missing = [c for c in groups if not landmarks or c not in landmarks]
        if missing:
            raise MissingLandmarks(f"i2l2 needs landmarks for categories {missing}")

    logger.info("开始预计算相似度：kind=%s, 类别数=%d, alpha=%s, threads=%d", kind, len(groups), alpha, threads)
    matrices: dict[str, SimMatrix] = {}
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for cat, objs in groups.items():
            members = [ViewSet(o.id, cat, load_views(manifest, o)) for o in objs]
            lm = landmarks.get(cat) if landmarks else None
            block = _category_block(kind, members, lm, pool)
            matrices[cat] = SimMatrix(cat, tuple(o.id for o in objs), block)
            logger.debug("类别 %s 完成：%d 个对象，%d 对", cat, len(objs), len(objs) * (len(objs) - 1) // 2)
    finally:
        if pool is not None:
            pool.shutdown()

    pair_count = sum(len(o) * (len(o) - 1) // 2 for o in groups.values())
    logger.info("预计算完成：共 %d 对相似度", pair_count)
    return SimStore(kind=kind, alpha=float(alpha), matrices=matrices, fingerprint=dataset_fingerprint(manifest))


def save_store(store: SimStore, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for n, (cat, m) in enumerate(store.matrices.items()):
        fname = f"sim_{n:04d}.emb"
        save_tensor(m.values, out / fname)
        index[cat] = {"file": fname, "ids": list(m.object_ids)}
    write_json(
        out / "index.json",
        {
            "format": STORE_FORMAT,
            "kind": store.kind,
            "alpha": store.alpha,
            "fingerprint": store.fingerprint,
            "categories": index,
        },
    )
    logger.info("相似度存储已写入 %s (%d 个类别)", out, len(index))


def load_store(store_dir: str | Path, manifest: DatasetManifest | None = None) -> SimStore:
    """Load a store; with a manifest, refuse stores built from a different dataset."""
    d = Path(store_dir)
    try:
        index = read_json(d / "index.json")
    except OSError as e:
        raise IoError(f"cannot read simstore index in {d}: {e}") from e
    if index.get("format") != STORE_FORMAT:
        raise DataError(f"{d}: unsupported simstore format {index.get('format')!r}")

    matrices: dict[str, SimMatrix] = {}
    for cat, entry in index["categories"].items():
        values = load_tensor(d / entry["file"])
        ids = tuple(entry["ids"])
        if values.shape != (len(ids), len(ids)):
            raise DataError(f"{d}: block {cat} has shape {values.shape} for {len(ids)} ids")
        matrices[cat] = SimMatrix(cat, ids, values)
    store = SimStore(
        kind=index["kind"], alpha=float(index["alpha"]), matrices=matrices, fingerprint=index["fingerprint"]
    )
    if manifest is not None:
        expected = dataset_fingerprint(manifest)
        if store.fingerprint != expected:
            raise FingerprintMismatch(
                f"simstore {d} was built for dataset {store.fingerprint[:12]}, current is {expected[:12]}"
            )
    return store
