"""Batch weights, the plain symmetric InfoNCE loss and its hard-negative weighted form.

Notation: ``S[i, s]`` is the 3D similarity between batch objects i and s;
row i of the logit matrix pairs image i with every shape s.

The weighted loss is::

    L = 1/(2N) sum_i [ -z_ii + log sum_s W_row[i, s] exp(z_is) ]
      + 1/(2N) sum_s [ -z_ss + log sum_i W_col[i, s] exp(z_is) ]

with ``z = scale * e_img @ e_shape.T``. Positive pairs keep weight 1, so
uniform weights reduce it to the plain loss.
"""
from dataclasses import dataclass
import math

import numpy as np
from numpy.typing import NDArray

from errors import NonPositiveSim, NumericError, ShapeMismatch
from numkit import logsumexp

DEFAULT_TAU = 0.07
MIN_LOGIT_SCALE = 1.0
MAX_LOGIT_SCALE = 100.0


@dataclass
class TemperatureParam:
    log_inv_tau: float

    @classmethod
    def from_tau(cls, tau: float = DEFAULT_TAU) -> "TemperatureParam":
        return cls(math.log(1.0 / tau)).clamped()

    @property
    def scale(self) -> float:
        return math.exp(self.log_inv_tau)

    def clamped(self) -> "TemperatureParam":
        lo, hi = math.log(MIN_LOGIT_SCALE), math.log(MAX_LOGIT_SCALE)
        return TemperatureParam(min(hi, max(lo, self.log_inv_tau)))


@dataclass(frozen=True)
class BatchWeights:
    row: NDArray[np.float64]
    col: NDArray[np.float64]

    @property
    def N(self) -> int:
        return int(self.row.shape[0])


@dataclass
class LossOutput:
    value: float
    grad_e_img: NDArray[np.float64]
    grad_e_shape: NDArray[np.float64]
    grad_log_inv_tau: float


def uniform_weights(n: int) -> BatchWeights:
    ones = np.ones((n, n), dtype=np.float64)
    return BatchWeights(ones, ones.copy())


def batch_weights(S: NDArray) -> BatchWeights:
    """Importance weights from a batch similarity matrix.

    Off-diagonal entries of row i (resp. column s) are rescaled so they sum
    to N - 1; the diagonal stays 1.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise ShapeMismatch(f"batch similarity must be square and non-empty, got {S.shape}")
    n = S.shape[0]
    if n == 1:
        return uniform_weights(1)
    off = ~np.eye(n, dtype=bool)
    if not np.all(np.isfinite(S)) or np.any(S[off] <= 0.0):
        raise NonPositiveSim("batch similarities must be finite and > 0")

    masked = np.where(off, S, 0.0)
    row = (n - 1) * S / masked.sum(axis=1, keepdims=True)
    col = (n - 1) * S / masked.sum(axis=0, keepdims=True)
    np.fill_diagonal(row, 1.0)
    np.fill_diagonal(col, 1.0)
    return BatchWeights(row, col)


def avg_weights(bs_i2i: NDArray, bs_i2l2: NDArray) -> BatchWeights:
    """Average the weights of two similarity sources (not the similarities)."""
    a, b = np.asarray(bs_i2i), np.asarray(bs_i2l2)
    if a.shape != b.shape:
        raise ShapeMismatch(f"batch similarity shapes differ: {a.shape} vs {b.shape}")
    wa, wb = batch_weights(a), batch_weights(b)
    return BatchWeights((wa.row + wb.row) / 2.0, (wa.col + wb.col) / 2.0)


def check_weight_sums(w: BatchWeights, tol: float = 1e-9) -> None:
    """Raise unless off-diagonal row sums of W_row and column sums of W_col equal N - 1."""
    n = w.N
    if n < 2:
        return
    off = ~np.eye(n, dtype=bool)
    rows = np.where(off, w.row, 0.0).sum(axis=1)
    cols = np.where(off, w.col, 0.0).sum(axis=0)
    err = max(float(np.max(np.abs(rows - (n - 1)))), float(np.max(np.abs(cols - (n - 1)))))
    if err > tol:
        raise NumericError(f"batch weight sums deviate from N-1 by {err:.3e}")


def _check_pair(e1: NDArray, e2: NDArray) -> tuple[NDArray, NDArray]:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.ndim != 2 or e1.shape != e2.shape or e1.shape[0] < 1:
        raise ShapeMismatch(f"embedding shapes {e1.shape} and {e2.shape} must match (N, F)")
    return e1, e2


def _softmax(logits: NDArray, axis: int) -> NDArray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _assemble(e1: NDArray, e2: NDArray, C: NDArray, scale: float, value: float, p_row: NDArray, p_col: NDArray):
    n = C.shape[0]
    dz = (p_row + p_col - 2.0 * np.eye(n)) / (2.0 * n)
    g = scale * dz
    return LossOutput(
        value=value,
        grad_e_img=g @ e2,
        grad_e_shape=g.T @ e1,
        grad_log_inv_tau=float(np.sum(g * C)),
    )


def plain_contrastive_loss(e1: NDArray, e2: NDArray, temp: TemperatureParam) -> LossOutput:
    """Symmetric InfoNCE over scaled cosine logits, both directions weighted 1/2."""
    e1, e2 = _check_pair(e1, e2)
    scale = temp.scale
    C = e1 @ e2.T
    Z = scale * C
    diag = np.diag(Z)
    lse_rows = logsumexp(Z, axis=1)
    lse_cols = logsumexp(Z, axis=0)
    n = Z.shape[0]
    value = float((np.sum(lse_rows - diag) + np.sum(lse_cols - diag)) / (2.0 * n))
    return _assemble(e1, e2, C, scale, value, _softmax(Z, 1), _softmax(Z, 0))


def hn_weighted_loss(e_img: NDArray, e_shape: NDArray, w: BatchWeights, temp: TemperatureParam) -> LossOutput:
    """Hard-negative weighted loss; log-weights are folded into the logits."""
    e1, e2 = _check_pair(e_img, e_shape)
    n = e1.shape[0]
    if w.row.shape != (n, n) or w.col.shape != (n, n):
        raise ShapeMismatch(f"weights {w.row.shape} do not match batch size {n}")
    scale = temp.scale
    C = e1 @ e2.T
    Z = scale * C
    diag = np.diag(Z)
    with np.errstate(divide="ignore"):
        zr = Z + np.log(w.row)
        zc = Z + np.log(w.col)
    lse_rows = logsumexp(zr, axis=1) if np.all(np.isfinite(zr)) else _lse_masked(zr, 1)
    lse_cols = logsumexp(zc, axis=0) if np.all(np.isfinite(zc)) else _lse_masked(zc, 0)
    value = float((np.sum(lse_rows - diag) + np.sum(lse_cols - diag)) / (2.0 * n))
    return _assemble(e1, e2, C, scale, value, _softmax(zr, 1), _softmax(zc, 0))


def _lse_masked(x: NDArray, axis: int) -> NDArray:
    # zero weights give -inf log-terms; the positive term keeps every row finite
    m = x.max(axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.exp(x - m).sum(axis=axis))
