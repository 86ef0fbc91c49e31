"""Numeric substrate shared by every other module.

All arithmetic runs in float64; tensors are stored as little-endian float32
and widened on load. Random streams use numpy's counter-based Philox
generator keyed by ``(seed, stream_id)``, so a stream is reproducible from
those two integers alone.
"""
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp as _scipy_logsumexp

from errors import EmptyInput, NonFinitePayload, ZeroVector

Vec = NDArray[np.float64]
Mat = NDArray[np.float64]

NORM_EPS = 1e-12
RNG_ALGORITHM = "Philox-4x64-10"


def as_f64(x: Any) -> NDArray[np.float64]:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFinitePayload("array contains NaN or Inf")
    return arr


def l2_normalize(v: Sequence[float] | Vec) -> Vec:
    v = as_f64(v)
    norm = float(np.linalg.norm(v))
    if norm <= NORM_EPS:
        raise ZeroVector(f"cannot normalize vector with norm {norm:.3e}")
    return v / norm


def l2_normalize_rows(m: Mat) -> Mat:
    m = as_f64(m)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmin(norms.reshape(-1)))
        raise ZeroVector(f"row {bad} has norm {float(norms.reshape(-1)[bad]):.3e}")
    return m / norms


def logsumexp(xs: Sequence[float] | NDArray, axis: int | None = None, b: NDArray | None = None):
    """log(sum(b * exp(xs))) with the max-shift trick.

    ``b`` folds non-negative weights into the sum; ``axis`` reduces a matrix
    row- or column-wise.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise EmptyInput("logsumexp of an empty sequence")
    if not np.all(np.isfinite(xs)):
        raise NonFinitePayload("logsumexp input contains NaN or Inf")
    out = _scipy_logsumexp(xs, axis=axis, b=b)
    return float(out) if np.ndim(out) == 0 else out


class RngStream:
    """Deterministic random stream identified by ``(seed, stream_id)``.

    A stream owns mutable generator state; use one stream per consumer and
    ``child()`` to derive independent ones.
    """

    def __init__(self, seed: int, stream_id: int = 0) -> None:
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)
        self.gen = np.random.Generator(self._bitgen)

    def child(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, stream_id)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, scale: float = 1.0, size=None):
        return self.gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> NDArray[np.int64]:
        return self.gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> NDArray[np.int64]:
        return self.gen.choice(n, size=size, replace=replace)

    def get_state(self) -> dict[str, Any]:
        """JSON-serializable generator state (for checkpoint metadata)."""
        return {
            "algorithm": RNG_ALGORITHM,
            "seed": self.seed,
            "stream_id": self.stream_id,
            "bit_generator": _jsonable(self._bitgen.state),
        }

    def set_state(self, state: dict[str, Any]) -> None:
        raw = state["bit_generator"]
        inner = raw["state"]
        restored = dict(raw)
        restored["state"] = {k: np.asarray(v, dtype=np.uint64) for k, v in inner.items()}
        restored["buffer"] = np.asarray(raw["buffer"], dtype=np.uint64)
        self._bitgen.state = restored


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
