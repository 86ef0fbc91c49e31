"""Permutation-invariant point-cloud encoder with a hand-written backward pass.

Architecture: shared per-point MLP 3 -> H1 -> H2 (tanh), max-pool over points,
linear projection H2 -> F, L2 normalization. Max-pool ties route the
gradient to the lowest point index (``np.argmax`` semantics).

Also home to the AdamW step, the warmup + cosine schedule, the training
augmentations and checkpoint I/O.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from config import AugmentConfig, TrainConfig
from datamodel import load_tensor, normalize_cloud, save_tensor
from errors import CacheMismatch, DataError, DegenerateCloud, IoError
from loss import TemperatureParam
from numkit import NORM_EPS, RngStream
from utils import read_json, write_json

logger = logging.getLogger(__name__)

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
CHECKPOINT_FORMAT = 1


@dataclass
class EncoderParams:
    tensors: dict[str, NDArray[np.float64]]
    temperature: TemperatureParam

    @classmethod
    def init(cls, hidden1: int, hidden2: int, feat_dim: int, rng: RngStream, tau: float = 0.07) -> "EncoderParams":
        def glorot(fan_in: int, fan_out: int) -> NDArray[np.float64]:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        tensors = {
            "w1": glorot(3, hidden1),
            "b1": np.zeros(hidden1),
            "w2": glorot(hidden1, hidden2),
            "b2": np.zeros(hidden2),
            "w3": glorot(hidden2, feat_dim),
            "b3": np.zeros(feat_dim),
        }
        return cls(tensors, TemperatureParam.from_tau(tau))

    @property
    def feat_dim(self) -> int:
        return int(self.tensors["w3"].shape[1])

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()}, TemperatureParam(self.temperature.log_inv_tau))


@dataclass
class ParamGrads:
    tensors: dict[str, NDArray[np.float64]]
    log_inv_tau: float = 0.0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "ParamGrads":
        return cls({k: np.zeros_like(v) for k, v in params.tensors.items()})

    def add_(self, other: "ParamGrads") -> "ParamGrads":
        for k, v in other.tensors.items():
            self.tensors[k] += v
        self.log_inv_tau += other.log_inv_tau
        return self


@dataclass
class EncodeCache:
    params: EncoderParams
    x: NDArray[np.float64]
    h1: NDArray[np.float64]
    h2: NDArray[np.float64]
    argmax: NDArray[np.int64]
    pooled: NDArray[np.float64]
    norm: float
    embedding: NDArray[np.float64]
    degenerate: bool = False


def encode_points(params: EncoderParams, cloud: NDArray) -> tuple[NDArray[np.float64], EncodeCache]:
    x = np.asarray(cloud, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] == 0:
        raise DataError(f"cloud must have shape (P, 3), got {x.shape}")
    t = params.tensors
    h1 = np.tanh(x @ t["w1"] + t["b1"])
    h2 = np.tanh(h1 @ t["w2"] + t["b2"])
    argmax = np.argmax(h2, axis=0)
    pooled = h2[argmax, np.arange(h2.shape[1])]
    z = pooled @ t["w3"] + t["b3"]
    norm = float(np.linalg.norm(z))

    degenerate = bool(x.shape[0] > 1 and np.all(h2 == h2[0]))
    if degenerate:
        logger.warning("点云逐点特征完全相同，max-pool 退化 (P=%d)", x.shape[0])
    if norm <= NORM_EPS:
        raise DegenerateCloud(f"encoder output collapsed to zero (norm {norm:.3e})")
    e = z / norm
    return e, EncodeCache(params, x, h1, h2, argmax, pooled, norm, e, degenerate)


def encoder_backward(params: EncoderParams, cache: EncodeCache, grad_embedding: NDArray) -> ParamGrads:
    """Gradients of every encoder tensor given dL/d(embedding)."""
    t = params.tensors
    g = np.asarray(grad_embedding, dtype=np.float64)
    if cache.params is not params or g.shape != cache.embedding.shape:
        raise CacheMismatch("cache does not belong to these parameters / this gradient shape")

    e = cache.embedding
    dz = (g - e * float(e @ g)) / cache.norm
    d_pooled = t["w3"] @ dz
    dh2 = np.zeros_like(cache.h2)
    dh2[cache.argmax, np.arange(dh2.shape[1])] = d_pooled
    da2 = dh2 * (1.0 - cache.h2**2)
    dh1 = da2 @ t["w2"].T
    da1 = dh1 * (1.0 - cache.h1**2)
    return ParamGrads(
        {
            "w1": cache.x.T @ da1,
            "b1": da1.sum(axis=0),
            "w2": cache.h1.T @ da2,
            "b2": da2.sum(axis=0),
            "w3": np.outer(cache.pooled, dz),
            "b3": dz,
        }
    )


def encode_many(
    params: EncoderParams, clouds: list[NDArray], threads: int = 1
) -> tuple[NDArray[np.float64], list[EncodeCache]]:
    """Encode a batch; results are in input order whatever the thread count."""
    if threads > 1 and len(clouds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: encode_points(params, c), clouds))
    else:
        results = [encode_points(params, c) for c in clouds]
    return np.stack([r[0] for r in results]), [r[1] for r in results]


def backward_many(params: EncoderParams, caches: list[EncodeCache], grad_embeddings: NDArray) -> ParamGrads:
    """Sum per-sample gradients in batch order."""
    total = ParamGrads.zeros_like(params)
    for cache, g in zip(caches, grad_embeddings):
        total.add_(encoder_backward(params, cache, g))
    return total


def augment(cloud: NDArray, rng: RngStream, cfg: AugmentConfig) -> NDArray[np.float64]:
    """Unit-sphere normalize, rotate about the up axis, translate, jitter."""
    pts = normalize_cloud(cloud)
    angle = float(rng.uniform(0.0, 1.0)) * cfg.max_rotation
    c, s = math.cos(angle), math.sin(angle)
    a, b = [i for i in range(3) if i != cfg.up_axis]
    rot = np.eye(3)
    rot[a, a], rot[a, b], rot[b, a], rot[b, b] = c, -s, s, c
    pts = pts @ rot.T

    shift = rng.uniform(-1.0, 1.0, size=3) * cfg.translate
    noise = np.clip(rng.normal(1.0, size=pts.shape) * cfg.jitter_sigma, -cfg.jitter_clip, cfg.jitter_clip)
    return pts + shift + noise


@dataclass
class AdamState:
    m: dict[str, NDArray[np.float64]]
    v: dict[str, NDArray[np.float64]]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        v = {k: np.zeros_like(x) for k, x in params.tensors.items()}
        m["log_inv_tau"] = np.zeros(1)
        v["log_inv_tau"] = np.zeros(1)
        return cls(m, v, 0)


def adamw_step(
    params: EncoderParams,
    grads: ParamGrads,
    state: AdamState,
    step: int,
    lr: float,
    weight_decay: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[EncoderParams, AdamState]:
    """One AdamW update; weight decay is decoupled and skips the temperature."""
    if step < 1:
        raise ValueError("adamw_step expects step >= 1")
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step

    def update(p: NDArray, g: NDArray, m: NDArray, v: NDArray, decay: float):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p = p * (1.0 - lr * decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        return p, m, v

    new_t, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        new_t[k], new_m[k], new_v[k] = update(p, grads.tensors[k], state.m[k], state.v[k], weight_decay)
    tau, new_m["log_inv_tau"], new_v["log_inv_tau"] = update(
        np.array([params.temperature.log_inv_tau]),
        np.array([grads.log_inv_tau]),
        state.m["log_inv_tau"],
        state.v["log_inv_tau"],
        0.0,
    )
    temperature = TemperatureParam(float(tau[0])).clamped()
    return EncoderParams(new_t, temperature), AdamState(new_m, new_v, step)


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to ``lr_min``."""
    step = min(max(step, 0), total_steps)
    warmup = cfg.warmup_steps(total_steps)
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    return cfg.lr_min + (cfg.base_lr - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Checkpoint:
    params: EncoderParams
    state: AdamState
    meta: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(out_dir: str | Path, params: EncoderParams, state: AdamState, meta: dict[str, Any]) -> Path:
    """One EMB1 file per tensor (plus Adam moments) and ``metadata.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, v in params.tensors.items():
        save_tensor(v, out / f"{k}.emb")
        save_tensor(state.m[k], out / f"adam_m_{k}.emb")
        save_tensor(state.v[k], out / f"adam_v_{k}.emb")
    write_json(
        out / "metadata.json",
        {
            **meta,
            "format": CHECKPOINT_FORMAT,
            "shapes": {k: list(v.shape) for k, v in params.tensors.items()},
            "log_inv_tau": params.temperature.log_inv_tau,
            "adam_step": state.step,
            "adam_tau": [float(state.m["log_inv_tau"][0]), float(state.v["log_inv_tau"][0])],
        },
    )
    return out


def load_checkpoint(ckpt_dir: str | Path) -> Checkpoint:
    d = Path(ckpt_dir)
    try:
        meta = read_json(d / "metadata.json")
    except OSError as e:
        raise IoError(f"cannot read checkpoint metadata in {d}: {e}") from e
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{d}: unsupported checkpoint format {meta.get('format')!r}")

    def read(name: str) -> NDArray[np.float64]:
        return load_tensor(d / f"{name}.emb").astype(np.float64)

    tensors = {k: read(k) for k in PARAM_NAMES}
    for k, shape in meta["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise DataError(f"{d}: tensor {k} has shape {tensors[k].shape}, metadata says {shape}")
    m = {k: read(f"adam_m_{k}") for k in PARAM_NAMES}
    v = {k: read(f"adam_v_{k}") for k in PARAM_NAMES}
    m["log_inv_tau"] = np.array([meta["adam_tau"][0]])
    v["log_inv_tau"] = np.array([meta["adam_tau"][1]])
    params = EncoderParams(tensors, TemperatureParam(float(meta["log_inv_tau"])))
    return Checkpoint(params, AdamState(m, v, int(meta["adam_step"])), meta)
