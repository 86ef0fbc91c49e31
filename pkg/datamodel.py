"""Dataset schema, the EMB1 tensor format, manifest parsing and validation.

EMB1 layout (little-endian)::

    bytes 0-3   b"EMB1"
    byte  4     version = 1
    byte  5     dtype code = 1 (float32)
    bytes 6-7   reserved, zero
    bytes 8-11  uint32 ndim
    then        ndim x uint64 dims
    then        row-major float32 payload
"""
from dataclasses import dataclass, field
import hashlib
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

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
from utils import read_json, sha256_file, write_json

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"
FORMAT_VERSION = 1
DTYPE_F32 = 1
HEADER_SIZE = 12
MANIFEST_VERSION = 1
MIN_POINTS = 8
RENORM_TOLERANCE = 1e-4


def save_tensor(matrix: NDArray, path: str | Path) -> None:
    arr = np.asarray(matrix)
    if arr.ndim == 0 or any(d == 0 for d in arr.shape):
        raise DimMismatch(f"refusing to save tensor with empty dims {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFinitePayload(f"refusing to save non-finite payload to {path}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = (
        MAGIC
        + bytes([FORMAT_VERSION, DTYPE_F32, 0, 0])
        + np.array([arr.ndim], dtype="<u4").tobytes()
        + np.array(arr.shape, dtype="<u8").tobytes()
    )
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload.tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def load_tensor(path: str | Path) -> NDArray[np.float32]:
    """Read an EMB1 file bit-exactly as float32. See ``load_embeddings`` for ingest."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e

    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"{path}: missing EMB1 magic")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: header truncated")
    if raw[4] != FORMAT_VERSION or raw[5] != DTYPE_F32 or raw[6:8] != b"\x00\x00":
        raise BadMagic(f"{path}: unsupported header version={raw[4]} dtype={raw[5]}")

    ndim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    dims_end = HEADER_SIZE + 8 * ndim
    if ndim == 0:
        raise DimMismatch(f"{path}: ndim must be >= 1")
    if len(raw) < dims_end:
        raise TruncatedFile(f"{path}: dims truncated")
    shape = tuple(int(d) for d in np.frombuffer(raw, dtype="<u8", count=ndim, offset=HEADER_SIZE))
    if any(d == 0 for d in shape):
        raise DimMismatch(f"{path}: empty dimension in {shape}")

    expected = math.prod(shape) * 4
    available = len(raw) - dims_end
    if available < expected:
        raise TruncatedFile(f"{path}: declared {expected // 4} floats, found {available // 4}")
    if available > expected:
        raise DimMismatch(f"{path}: {available - expected} trailing bytes after payload")

    arr = np.frombuffer(raw, dtype="<f4", offset=dims_end).reshape(shape).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFinitePayload(f"{path}: payload contains NaN or Inf")
    return arr


def load_embeddings(path: str | Path) -> NDArray[np.float64]:
    """Load an embedding matrix, widened to f64 with every row re-normalized."""
    arr = load_tensor(path).astype(np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimMismatch(f"{path}: embeddings must be 2-D, got shape {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    drift = float(np.max(np.abs(norms - 1.0)))
    if drift > RENORM_TOLERANCE:
        logger.warning("嵌入行范数偏离 1 超过容差: %s (max |norm-1|=%.3e)，已重新归一化", path, drift)
    return l2_normalize_rows(arr)


def normalize_cloud(cloud: NDArray) -> NDArray[np.float64]:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(cloud, dtype=np.float64)
    centered = pts - pts.mean(axis=0, keepdims=True)
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius <= 1e-12:
        return centered
    return centered / radius


def load_cloud(path: str | Path, normalize: bool = True) -> NDArray[np.float64]:
    arr = load_tensor(path).astype(np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimMismatch(f"{path}: point cloud must have shape (P, 3), got {arr.shape}")
    if arr.shape[0] < MIN_POINTS:
        raise DimMismatch(f"{path}: point cloud has {arr.shape[0]} points, need >= {MIN_POINTS}")
    return normalize_cloud(arr) if normalize else arr


@dataclass(frozen=True)
class LandmarkSet:
    category: str
    matrix: NDArray[np.float64]

    @property
    def L(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class CategoryEntry:
    id: str
    landmark_file: str | None = None
    prompt_embedding_file: str | None = None


@dataclass
class ObjectEntry:
    id: str
    category: str
    views_file: str
    cloud_file: str
    split: str | None = None


@dataclass
class DatasetManifest:
    version: int
    feat_dim: int
    views_per_object: int
    categories: list[CategoryEntry]
    objects: list[ObjectEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    @property
    def category_ids(self) -> list[str]:
        return [c.id for c in self.categories]

    def category(self, cid: str) -> CategoryEntry:
        for c in self.categories:
            if c.id == cid:
                return c
        raise DataError(f"unknown category {cid!r}")

    def object(self, oid: str) -> ObjectEntry:
        for o in self.objects:
            if o.id == oid:
                return o
        raise UnknownObject(f"unknown object {oid!r}")

    @property
    def declares_splits(self) -> bool:
        return any(o.split is not None for o in self.objects)

    def split_objects(self, split: str | None) -> list[ObjectEntry]:
        """Objects of ``split``; a manifest without any split markers is one undivided split."""
        if split is None or not self.declares_splits:
            return list(self.objects)
        return [o for o in self.objects if (o.split or "train") == split]

    def objects_by_category(self) -> dict[str, list[ObjectEntry]]:
        """Objects grouped by category, categories and members in manifest order."""
        groups: dict[str, list[ObjectEntry]] = {}
        for o in self.objects:
            groups.setdefault(o.category, []).append(o)
        return groups

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "feat_dim": self.feat_dim,
            "views_per_object": self.views_per_object,
            "categories": [
                {k: v for k, v in vars(c).items() if v is not None} for c in self.categories
            ],
            "objects": [{k: v for k, v in vars(o).items() if v is not None} for o in self.objects],
        }


def parse_manifest(raw: dict[str, Any], root: str | Path = ".") -> DatasetManifest:
    try:
        version = int(raw["version"])
        feat_dim = int(raw["feat_dim"])
        views = int(raw["views_per_object"])
        categories = [
            CategoryEntry(
                id=str(c["id"]),
                landmark_file=c.get("landmark_file"),
                prompt_embedding_file=c.get("prompt_embedding_file"),
            )
            for c in raw["categories"]
        ]
        objects = [
            ObjectEntry(
                id=str(o["id"]),
                category=str(o["category"]),
                views_file=str(o["views_file"]),
                cloud_file=str(o["cloud_file"]),
                split=None if o.get("split") is None else str(o["split"]),
            )
            for o in raw["objects"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed manifest: {e!r}") from e

    if version != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {version}")
    if feat_dim < 2:
        raise DataError(f"feat_dim must be >= 2, got {feat_dim}")
    if views < 1:
        raise DataError(f"views_per_object must be >= 1, got {views}")
    return DatasetManifest(version, feat_dim, views, categories, objects, Path(root))


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse ``manifest.json`` (or a directory containing one)."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        raw = read_json(p)
    except OSError as e:
        raise IoError(f"cannot read manifest {p}: {e}") from e
    except ValueError as e:
        raise DataError(f"manifest {p} is not valid JSON: {e}") from e
    return parse_manifest(raw, root=p.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    write_json(path, manifest.to_dict())


@dataclass
class Violation:
    object_id: str
    message: str


@dataclass
class ValidationReport:
    checked: int = 0
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, object_id: str, message: str) -> None:
        self.violations.append(Violation(object_id, message))


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Check every object and category entry; violations are collected, never raised."""
    report = ValidationReport()
    F, R = manifest.feat_dim, manifest.views_per_object
    known = set()
    for c in manifest.categories:
        if c.id in known:
            report.add(c.id, "duplicate category id")
        known.add(c.id)
        if c.landmark_file:
            try:
                lm = load_tensor(manifest.resolve(c.landmark_file))
                if lm.ndim != 2 or lm.shape[1] != F:
                    report.add(c.id, f"landmarks shape {lm.shape}, expected (L, {F})")
            except (DataError, IoError) as e:
                report.add(c.id, f"landmarks: {e}")
        if c.prompt_embedding_file:
            try:
                pe = load_tensor(manifest.resolve(c.prompt_embedding_file))
                if pe.shape not in ((F,), (1, F)):
                    report.add(c.id, f"prompt embedding shape {pe.shape}, expected ({F},)")
            except (DataError, IoError) as e:
                report.add(c.id, f"prompt embedding: {e}")

    seen: set[str] = set()
    for o in manifest.objects:
        report.checked += 1
        if o.id in seen:
            report.add(o.id, "duplicate object id")
        seen.add(o.id)
        if o.category not in known:
            report.add(o.id, f"unknown category {o.category!r}")
        if o.split not in (None, "train", "test"):
            report.add(o.id, f"unknown split {o.split!r}")
        try:
            views = load_tensor(manifest.resolve(o.views_file))
            if views.shape != (R, F):
                report.add(o.id, f"views shape {views.shape}, expected ({R}, {F})")
        except (DataError, IoError) as e:
            report.add(o.id, f"views: {e}")
        try:
            cloud = load_tensor(manifest.resolve(o.cloud_file))
            if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] < MIN_POINTS:
                report.add(o.id, f"cloud shape {cloud.shape}, expected (P>={MIN_POINTS}, 3)")
        except (DataError, IoError) as e:
            report.add(o.id, f"cloud: {e}")

    if report.ok:
        logger.info("数据集校验通过：%d 个对象", report.checked)
    else:
        logger.warning("数据集校验发现 %d 处问题", len(report.violations))
    return report


def require_valid(manifest: DatasetManifest) -> None:
    report = validate_dataset(manifest)
    if not report.ok:
        first = report.violations[0]
        raise DataError(
            f"dataset invalid ({len(report.violations)} violations), first: {first.object_id}: {first.message}"
        )


def load_views(manifest: DatasetManifest, obj: ObjectEntry) -> NDArray[np.float64]:
    views = load_embeddings(manifest.resolve(obj.views_file))
    if views.shape != (manifest.views_per_object, manifest.feat_dim):
        raise DimMismatch(f"{obj.id}: views shape {views.shape}")
    return views


def load_object_cloud(manifest: DatasetManifest, obj: ObjectEntry) -> NDArray[np.float64]:
    return load_cloud(manifest.resolve(obj.cloud_file))


def load_landmarks(manifest: DatasetManifest) -> dict[str, LandmarkSet]:
    """Every landmark set the manifest declares, keyed by category."""
    out: dict[str, LandmarkSet] = {}
    for c in manifest.categories:
        if not c.landmark_file:
            continue
        mat = load_embeddings(manifest.resolve(c.landmark_file))
        if mat.shape[1] != manifest.feat_dim:
            raise DimMismatch(f"landmarks of {c.id}: feature dim {mat.shape[1]} != {manifest.feat_dim}")
        out[c.id] = LandmarkSet(category=c.id, matrix=mat)
    return out


def load_prompt_embeddings(manifest: DatasetManifest) -> tuple[list[str], NDArray[np.float64]]:
    """Category ids and their prompt embeddings as a (C, F) matrix."""
    names, rows = [], []
    for c in manifest.categories:
        if not c.prompt_embedding_file:
            raise CategorySetMismatch(f"category {c.id!r} has no prompt_embedding_file")
        rows.append(load_embeddings(manifest.resolve(c.prompt_embedding_file))[0])
        names.append(c.id)
    return names, np.stack(rows)


def dataset_fingerprint(manifest: DatasetManifest) -> str:
    """sha256 over object ids, their categories and the digests of every referenced file."""
    h = hashlib.sha256()
    h.update(f"F={manifest.feat_dim};R={manifest.views_per_object}\n".encode())
    for c in manifest.categories:
        h.update(f"category:{c.id}\n".encode())
        if c.landmark_file:
            h.update(sha256_file(manifest.resolve(c.landmark_file)).encode())
    for o in manifest.objects:
        h.update(f"object:{o.id}:{o.category}\n".encode())
        h.update(sha256_file(manifest.resolve(o.views_file)).encode())
        h.update(sha256_file(manifest.resolve(o.cloud_file)).encode())
    return h.hexdigest()
