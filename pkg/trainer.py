"""Contrastive training of the point encoder against frozen view embeddings."""
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
import time

import numpy as np
from numpy.typing import NDArray

from config import TrainConfig
from datamodel import DatasetManifest, dataset_fingerprint, load_object_cloud, load_views
from encoder import (
    AdamState,
    EncoderParams,
    ParamGrads,
    adamw_step,
    augment,
    backward_many,
    encode_many,
    lr_schedule,
    save_checkpoint,
)
from errors import ConfigInvalid, FingerprintMismatch, NonFiniteLoss
from loss import BatchWeights, avg_weights, batch_weights, check_weight_sums, hn_weighted_loss, uniform_weights
from numkit import RngStream
from simstore import SimStore
from utils import write_csv

logger = logging.getLogger(__name__)

METRICS_HEADER = ["step", "epoch", "loss", "lr", "logit_scale", "wall_ms"]
MODE_STORES = {"plain": (), "hn-i2i": ("i2i",), "hn-i2l2": ("i2l2",), "hn-avg": ("i2i", "i2l2")}

# RngStream ids
STREAM_INIT, STREAM_SHUFFLE, STREAM_VIEWS, STREAM_AUGMENT = 0, 1, 2, 3


@dataclass
class TrainRun:
    config: TrainConfig
    manifest: DatasetManifest
    out_dir: Path
    stores: dict[str, SimStore] = field(default_factory=dict)
    split: str | None = "train"


@dataclass
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    losses: list[float]
    params: EncoderParams


def check_stores(mode: str, stores: dict[str, SimStore], manifest: DatasetManifest) -> None:
    needed = MODE_STORES[mode]
    for kind in needed:
        if kind not in stores:
            raise ConfigInvalid(f"mode {mode} needs a {kind} simstore")
        if stores[kind].kind != kind:
            raise ConfigInvalid(f"store given as {kind} is of kind {stores[kind].kind}")
    if needed:
        fp = dataset_fingerprint(manifest)
        for kind in needed:
            if stores[kind].fingerprint != fp:
                raise FingerprintMismatch(f"{kind} simstore does not match this dataset")


def compute_weights(mode: str, stores: dict[str, SimStore], ids: list[str]) -> BatchWeights:
    if mode == "plain":
        return uniform_weights(len(ids))
    if mode == "hn-avg":
        return avg_weights(stores["i2i"].batch_sim(ids), stores["i2l2"].batch_sim(ids))
    kind = MODE_STORES[mode][0]
    return batch_weights(stores[kind].batch_sim(ids))


def batch_loss_and_grads(
    params: EncoderParams,
    clouds: list[NDArray],
    e_img: NDArray,
    weights: BatchWeights,
    threads: int = 1,
) -> tuple[float, ParamGrads]:
    """Weighted loss of one batch and its gradient w.r.t. every encoder parameter."""
    e_shape, caches = encode_many(params, clouds, threads)
    out = hn_weighted_loss(e_img, e_shape, weights, params.temperature)
    grads = backward_many(params, caches, out.grad_e_shape)
    grads.log_inv_tau = out.grad_log_inv_tau
    return out.value, grads


def make_batches(order: NDArray, batch_size: int) -> list[NDArray]:
    """Consecutive slices of ``order``; a trailing singleton is dropped."""
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    return [b for b in batches if len(b) >= 2]


def train(run: TrainRun) -> TrainResult:
    cfg = run.config
    objects = run.manifest.split_objects(run.split)
    if len(objects) < 2:
        raise ConfigInvalid(f"need at least 2 training objects, found {len(objects)}")
    steps_per_epoch = len(make_batches(np.arange(len(objects)), cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    cfg.validate(total_steps)
    check_stores(cfg.mode, run.stores, run.manifest)

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(
        "开始训练：mode=%s, 对象数=%d, batch=%d, epochs=%d, 总步数=%d",
        cfg.mode, len(objects), cfg.batch_size, cfg.epochs, total_steps,
    )

    ids = [o.id for o in objects]
    views = [load_views(run.manifest, o) for o in objects]
    clouds = [load_object_cloud(run.manifest, o) for o in objects]

    rng_init = RngStream(cfg.seed, STREAM_INIT)
    rng_shuffle = RngStream(cfg.seed, STREAM_SHUFFLE)
    rng_views = RngStream(cfg.seed, STREAM_VIEWS)
    rng_aug = RngStream(cfg.seed, STREAM_AUGMENT)

    params = EncoderParams.init(cfg.hidden1, cfg.hidden2, run.manifest.feat_dim, rng_init, cfg.tau_init)
    state = AdamState.zeros_like(params)
    losses: list[float] = []
    rows: list[list] = []
    step = 0

    def meta(epoch: int) -> dict:
        return {
            "config": cfg.to_dict(),
            "step": step,
            "epoch": epoch,
            "feat_dim": run.manifest.feat_dim,
            "rng_state": {
                "shuffle": rng_shuffle.get_state(),
                "views": rng_views.get_state(),
                "augment": rng_aug.get_state(),
            },
        }

    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(len(objects))
        for batch in make_batches(order, cfg.batch_size):
            t0 = time.perf_counter()
            step += 1
            batch_ids = [ids[i] for i in batch]
            e_img = np.stack([views[i][int(rng_views.integers(0, views[i].shape[0]))] for i in batch])
            batch_clouds = [augment(clouds[i], rng_aug, cfg.augment) for i in batch]

            weights = compute_weights(cfg.mode, run.stores, batch_ids)
            check_weight_sums(weights)
            value, grads = batch_loss_and_grads(params, batch_clouds, e_img, weights, cfg.threads)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.tensors.values()):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch} step {step}, batch ids {batch_ids}")

            lr = lr_schedule(step, cfg, total_steps)
            params, state = adamw_step(
                params, grads, state, step, lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps
            )
            wall_ms = (time.perf_counter() - t0) * 1000.0
            losses.append(value)
            rows.append([step, epoch, repr(value), repr(lr), repr(params.temperature.scale), f"{wall_ms:.1f}"])
            logger.debug("step=%d epoch=%d loss=%.6f lr=%.3e scale=%.3f", step, epoch, value, lr, params.temperature.scale)

        save_checkpoint(out / "checkpoints" / f"epoch_{epoch:03d}", params, state, meta(epoch))
        logger.info("epoch %d/%d 完成：最近 loss=%.4f, logit_scale=%.3f", epoch, cfg.epochs, losses[-1], params.temperature.scale)

    final_dir = save_checkpoint(out / "final", params, state, meta(cfg.epochs))
    metrics_path = out / "metrics.csv"
    write_csv(metrics_path, METRICS_HEADER, rows)
    logger.info("训练结束：checkpoint=%s, metrics=%s", final_dir, metrics_path)
    return TrainResult(final_dir, metrics_path, losses, params)
