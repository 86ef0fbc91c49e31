import csv
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from config import AugmentConfig
from datamodel import load_object_cloud, load_views
from encoder import EncoderParams, encode_many, load_checkpoint
from errors import ConfigInvalid, FingerprintMismatch
from loss import TemperatureParam, batch_weights
from numkit import RngStream, l2_normalize_rows
from simstore import precompute
from trainer import TrainRun, batch_loss_and_grads, make_batches, train

from conftest import small_train_config


def test_make_batches_drops_trailing_singleton():
    batches = make_batches(np.arange(7), 3)
    assert [b.tolist() for b in batches] == [[0, 1, 2], [3, 4, 5]]
    assert [len(b) for b in make_batches(np.arange(8), 3)] == [3, 3, 2]


def test_training_is_deterministic(tmp_path, manifest, stores):
    cfg = small_train_config(mode="hn-i2l2")
    a = train(TrainRun(cfg, manifest, tmp_path / "a", {"i2l2": stores["i2l2"]}))
    b = train(TrainRun(cfg.replace(threads=3), manifest, tmp_path / "b", {"i2l2": stores["i2l2"]}))
    assert a.losses == b.losses
    for k in a.params.tensors:
        assert np.array_equal(a.params.tensors[k], b.params.tensors[k])
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != b""


def test_outputs_layout(tmp_path, manifest):
    cfg = small_train_config()
    result = train(TrainRun(cfg, manifest, tmp_path / "run"))
    # 15 training objects, batch 6 -> 3 steps per epoch
    assert len(result.losses) == 3 * cfg.epochs
    with open(result.metrics_path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "epoch", "loss", "lr", "logit_scale", "wall_ms"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 3 * cfg.epochs + 1))
    for epoch in range(1, cfg.epochs + 1):
        assert (tmp_path / "run" / "checkpoints" / f"epoch_{epoch:03d}" / "metadata.json").exists()
    ckpt = load_checkpoint(result.checkpoint_dir)
    assert ckpt.meta["step"] == 3 * cfg.epochs
    assert ckpt.params.feat_dim == manifest.feat_dim


def test_unit_weights_give_the_plain_trajectory(tmp_path, make_dataset, rng):
    views = l2_normalize_rows(rng.normal(size=(2, 8)))
    objects = {f"o{i}": ("only", views, rng.normal(size=(16, 3))) for i in range(4)}
    manifest = make_dataset(objects)
    store = precompute(manifest, "i2i")
    assert np.all(store.batch_sim(list(objects)) == store.batch_sim(list(objects))[0, 0])

    cfg = small_train_config(batch_size=4, epochs=3)
    plain = train(TrainRun(cfg, manifest, tmp_path / "plain"))
    hn = train(TrainRun(cfg.replace(mode="hn-i2i"), manifest, tmp_path / "hn", {"i2i": store}))
    assert hn.losses == plain.losses
    for k in plain.params.tensors:
        assert np.array_equal(hn.params.tensors[k], plain.params.tensors[k])


def test_batch_gradient_matches_finite_differences(manifest, stores, rng):
    objs = manifest.objects[:5]
    clouds = [load_object_cloud(manifest, o) for o in objs]
    e_img = np.stack([load_views(manifest, o)[0] for o in objs])
    weights = batch_weights(stores["i2i"].batch_sim([o.id for o in objs]))
    params = EncoderParams.init(6, 10, manifest.feat_dim, RngStream(2, 0), tau=0.5)
    _, grads = batch_loss_and_grads(params, clouds, e_img, weights)
    h = 1e-6

    def value():
        return batch_loss_and_grads(params, clouds, e_img, weights)[0]

    for name in ("w1", "w3", "b2"):
        t = params.tensors[name]
        fd = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            plus = value()
            t[idx] = old - h
            minus = value()
            t[idx] = old
            fd[idx] = (plus - minus) / (2 * h)
        err = np.linalg.norm(grads.tensors[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-5, name

    base = params.temperature.log_inv_tau
    params.temperature = TemperatureParam(base + h)
    plus = value()
    params.temperature = TemperatureParam(base - h)
    minus = value()
    assert grads.log_inv_tau == pytest.approx((plus - minus) / (2 * h), rel=1e-5)


def _loss_and_pooling(params, clouds, e_img, weights):
    value = batch_loss_and_grads(params, clouds, e_img, weights)[0]
    return value, [c.argmax for c in encode_many(params, clouds)[1]]


def test_encoder_gradients_on_random_configurations(rng):
    h = 1e-6
    checked = skipped = 0
    for _ in range(100):
        n, feat, points = (int(v) for v in rng.integers((2, 2, 8), (17, 33, 33)))
        hidden1, hidden2 = (int(v) for v in rng.integers((2, 2), (9, 13)))
        tau = float(rng.uniform(0.05, 1.0))
        params = EncoderParams.init(hidden1, hidden2, feat, RngStream(int(rng.integers(1 << 30)), 0), tau=tau)
        clouds = [rng.normal(size=(points, 3)) for _ in range(n)]
        e_img = l2_normalize_rows(rng.normal(size=(n, feat)))
        s = rng.uniform(0.05, 1.0, size=(n, n))
        s = (s + s.T) / 2.0
        np.fill_diagonal(s, 1.0)
        weights = batch_weights(s)
        _, grads = batch_loss_and_grads(params, clouds, e_img, weights)

        for name in list(params.tensors):
            base = params.tensors[name]
            d = rng.normal(size=base.shape)
            d /= np.linalg.norm(d)
            params.tensors[name] = base + h * d
            plus, pooled_plus = _loss_and_pooling(params, clouds, e_img, weights)
            params.tensors[name] = base - h * d
            minus, pooled_minus = _loss_and_pooling(params, clouds, e_img, weights)
            params.tensors[name] = base
            # a max-pool switch between the two points leaves a kink in the loss
            if any(not np.array_equal(a, b) for a, b in zip(pooled_plus, pooled_minus)):
                skipped += 1
                continue
            analytic = float(np.sum(grads.tensors[name] * d))
            numeric = (plus - minus) / (2 * h)
            assert abs(analytic - numeric) <= 1e-5 * max(abs(analytic), abs(numeric)) + 1e-7, name
            checked += 1

        log_inv_tau = params.temperature.log_inv_tau
        params.temperature = TemperatureParam(log_inv_tau + h)
        plus, _ = _loss_and_pooling(params, clouds, e_img, weights)
        params.temperature = TemperatureParam(log_inv_tau - h)
        minus, _ = _loss_and_pooling(params, clouds, e_img, weights)
        params.temperature = TemperatureParam(log_inv_tau)
        assert grads.log_inv_tau == pytest.approx((plus - minus) / (2 * h), rel=1e-5, abs=1e-7)
    assert skipped <= checked // 10


def test_loss_goes_down(tmp_path, manifest):
    cfg = small_train_config(epochs=12, base_lr=1e-2, augment=AugmentConfig.disabled())
    result = train(TrainRun(cfg, manifest, tmp_path / "run"))
    first, last = np.mean(result.losses[:3]), np.mean(result.losses[-3:])
    assert last < first


def test_missing_store_is_rejected(tmp_path, manifest, stores):
    cfg = small_train_config(mode="hn-avg")
    with pytest.raises(ConfigInvalid):
        train(TrainRun(cfg, manifest, tmp_path / "run", {"i2i": stores["i2i"]}))
    with pytest.raises(ConfigInvalid):
        train(TrainRun(cfg.replace(mode="hn-i2i"), manifest, tmp_path / "run", {"i2i": stores["i2l2"]}))


def test_store_from_another_dataset_is_rejected(tmp_path, manifest, make_dataset, rng):
    views = l2_normalize_rows(rng.normal(size=(2, 8)))
    other = make_dataset({f"o{i}": ("only", views, rng.normal(size=(16, 3))) for i in range(3)})
    store = precompute(other, "i2i")
    with pytest.raises(FingerprintMismatch):
        train(TrainRun(small_train_config(mode="hn-i2i"), manifest, tmp_path / "run", {"i2i": store}))


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_separate_runs_write_identical_checkpoints(tmp_path, manifest, stores):
    cfg = small_train_config(mode="hn-avg")
    for name in ("a", "b"):
        train(TrainRun(cfg, manifest, tmp_path / name, {"i2i": stores["i2i"], "i2l2": stores["i2l2"]}))
    a, b = _tree_bytes(tmp_path / "a" / "checkpoints"), _tree_bytes(tmp_path / "b" / "checkpoints")
    assert a.keys() == b.keys() and a == b
    assert _tree_bytes(tmp_path / "a" / "final") == _tree_bytes(tmp_path / "b" / "final")


@pytest.mark.slow
def test_separate_processes_write_identical_checkpoints(tmp_path, dataset_dir):
    repo = Path(__file__).resolve().parents[1]
    env = {**os.environ, "HN3D_LOG_FILE": "0"}
    for name, hash_seed in (("a", "1"), ("b", "2")):
        proc = subprocess.run(
            [sys.executable, "main.py", "train", "--data", str(dataset_dir), "--mode", "plain", "--batch", "6",
             "--epochs", "3", "--hidden1", "8", "--hidden2", "16", "--threads", "2",
             "--out", str(tmp_path / name)],
            cwd=repo, env={**env, "PYTHONHASHSEED": hash_seed}, capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
    assert _tree_bytes(tmp_path / "a" / "final") == _tree_bytes(tmp_path / "b" / "final")
