"""Neural 3D-to-3D similarities (I2I, (I2L)^2) and the geometric baselines.

Views of two objects are matched by index: every object is rendered from the
same fixed camera poses, so view r of one object corresponds to view r of
any other.
"""
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from datamodel import LandmarkSet
from errors import CategoryMismatch, CloudTooLarge, DimMismatch, EmptyCloud, ShapeMismatch, ViewCountMismatch
from numkit import RngStream

EMD_EXACT_MAX = 256
EMD_MAX_POINTS = 4096
EMD_SUBSAMPLE_SEED = 0x3D3D


@dataclass(frozen=True)
class ViewSet:
    object_id: str
    category: str
    views: NDArray[np.float64]

    @property
    def R(self) -> int:
        return int(self.views.shape[0])


@dataclass(frozen=True)
class DescriptorSet:
    object_id: str
    category: str
    descriptors: NDArray[np.float64]


def i2i_similarity(a: ViewSet, b: ViewSet) -> float:
    """(mean_r <a_r, b_r> + 1) / 2."""
    if a.views.shape[0] != b.views.shape[0]:
        raise ViewCountMismatch(f"{a.object_id} has {a.R} views, {b.object_id} has {b.R}")
    if a.views.shape[1] != b.views.shape[1]:
        raise DimMismatch(f"feature dims differ: {a.views.shape[1]} vs {b.views.shape[1]}")
    cos = np.einsum("rf,rf->r", a.views, b.views)
    x = float(np.mean(cos))
    return min(1.0, max(0.0, (x + 1.0) / 2.0))


def build_descriptors(a: ViewSet, landmarks: LandmarkSet) -> DescriptorSet:
    if a.category != landmarks.category:
        raise CategoryMismatch(f"{a.object_id} is {a.category!r}, landmarks are {landmarks.category!r}")
    if a.views.shape[1] != landmarks.matrix.shape[1]:
        raise DimMismatch(f"view dim {a.views.shape[1]} != landmark dim {landmarks.matrix.shape[1]}")
    return DescriptorSet(a.object_id, a.category, a.views @ landmarks.matrix.T)


def i2l2_similarity(da: DescriptorSet, db: DescriptorSet) -> float:
    """1 / (1 + mean_r ||da_r - db_r||)."""
    if da.category != db.category:
        raise CategoryMismatch(f"{da.object_id} ({da.category}) vs {db.object_id} ({db.category})")
    if da.descriptors.shape != db.descriptors.shape:
        raise ShapeMismatch(f"descriptor shapes {da.descriptors.shape} vs {db.descriptors.shape}")
    dist = np.linalg.norm(da.descriptors - db.descriptors, axis=1)
    return 1.0 / (1.0 + float(np.mean(dist)))


def _check_cloud(p: NDArray, name: str) -> NDArray[np.float64]:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise EmptyCloud(f"{name} is empty")
    if p.shape[1] != 3:
        raise DimMismatch(f"{name} must have shape (P, 3), got {p.shape}")
    return p


def chamfer_distance(p: NDArray, q: NDArray) -> float:
    """Mean squared nearest-neighbour distance, summed over both directions."""
    p = _check_cloud(p, "p")
    q = _check_cloud(q, "q")
    d2 = cdist(p, q, metric="sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def _subsample(points: NDArray, n: int, stream_id: int) -> NDArray:
    if points.shape[0] == n:
        return points
    idx = np.sort(RngStream(EMD_SUBSAMPLE_SEED, stream_id).choice(points.shape[0], n, replace=False))
    return points[idx]


def emd(p: NDArray, q: NDArray, exact_max: int = EMD_EXACT_MAX) -> float:
    """Mean Euclidean distance under the optimal one-to-one matching.

    The larger set is subsampled (fixed seed) to the size of the smaller one;
    sets above ``exact_max`` points are both subsampled to ``exact_max``.
    """
    p = _check_cloud(p, "p")
    q = _check_cloud(q, "q")
    if max(p.shape[0], q.shape[0]) > EMD_MAX_POINTS:
        raise CloudTooLarge(f"emd supports at most {EMD_MAX_POINTS} points")
    n = min(p.shape[0], q.shape[0], exact_max)
    p = _subsample(p, n, 1)
    q = _subsample(q, n, 2)
    cost = cdist(p, q, metric="euclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def rank_by_score(
    query_id: str,
    candidate_ids: list[str],
    score: Callable[[str, str], float],
    higher_is_better: bool = True,
) -> list[tuple[str, float]]:
    """Score every candidate against the query; stable order on ties."""
    scored = [(cid, score(query_id, cid)) for cid in candidate_ids if cid != query_id]
    sign = -1.0 if higher_is_better else 1.0
    return sorted(scored, key=lambda item: sign * item[1])
