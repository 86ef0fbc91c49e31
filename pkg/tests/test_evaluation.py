import logging

import numpy as np
import pytest

from config import ProbeConfig, SynthConfig
from errors import CategorySetMismatch, MissingGroundTruth, SplitLeakage
from evaluation import (
    ABLATION_HEADER,
    MetricsReport,
    ablate_landmarks,
    bidirectional_retrieval,
    cross_modal_retrieval,
    evaluate,
    linear_probe,
    linear_probe_embeddings,
    target_ranks,
    zero_shot_from_embeddings,
)
from numkit import l2_normalize_rows
from oracles import oracle_retrieval
from trainer import TrainRun, train

from conftest import small_train_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory, manifest, stores):
    out = tmp_path_factory.mktemp("trained")
    cfg = small_train_config(mode="hn-i2l2", epochs=3)
    return train(TrainRun(cfg, manifest, out, {"i2l2": stores["i2l2"]})).params


def test_ties_rank_lower_index_first():
    scores = np.array([[0.5, 0.5, 0.1], [0.2, 0.2, 0.2]])
    assert target_ranks(scores, np.array([1, 0])).tolist() == [1, 0]
    assert target_ranks(scores, np.array([0, 2])).tolist() == [0, 2]


def test_retrieval_matches_oracle(rng):
    q = l2_normalize_rows(rng.normal(size=(20, 6)))
    g = l2_normalize_rows(rng.normal(size=(20, 6)))
    gt = rng.permutation(20)
    report = cross_modal_retrieval(q, g, gt, ks=(1, 5))
    expected = oracle_retrieval(q.tolist(), g.tolist(), gt.tolist(), ks=(1, 5))
    assert report.topk == expected
    assert report.count == 20


def test_retrieval_needs_ground_truth(rng):
    q = l2_normalize_rows(rng.normal(size=(3, 4)))
    with pytest.raises(MissingGroundTruth):
        cross_modal_retrieval(q, q, np.array([0, 1]))
    with pytest.raises(MissingGroundTruth):
        cross_modal_retrieval(q, q, np.array([0, 1, 3]))


def test_identical_modalities_retrieve_perfectly(rng):
    e = l2_normalize_rows(rng.normal(size=(10, 8)))
    fwd, bwd, mean = bidirectional_retrieval(e, e, labels=["a"] * 5 + ["b"] * 5)
    assert fwd.top1 == bwd.top1 == 1.0
    assert mean == {1: 1.0, 5: 1.0}
    assert fwd.per_category == {"a": 1.0, "b": 1.0}


def test_zero_shot_on_prompt_embeddings(rng):
    prompts = l2_normalize_rows(rng.normal(size=(4, 8)))
    names = ["w", "x", "y", "z"]
    report = zero_shot_from_embeddings(prompts[[2, 0, 3]], ["y", "w", "z"], names, prompts)
    assert report.top1 == 1.0
    assert report.rows()[0][:3] == ["zeroshot", "all", 3]
    with pytest.raises(CategorySetMismatch):
        zero_shot_from_embeddings(prompts[:1], ["q"], names, prompts)


def test_linear_probe_separates_clusters(rng):
    centers = l2_normalize_rows(rng.normal(size=(3, 6))) * 3
    labels = ["a", "b", "c"]
    train_x = np.concatenate([centers[i] + 0.1 * rng.normal(size=(10, 6)) for i in range(3)])
    test_x = np.concatenate([centers[i] + 0.1 * rng.normal(size=(4, 6)) for i in range(3)])
    report = linear_probe_embeddings(
        train_x, [l for l in labels for _ in range(10)], test_x, [l for l in labels for _ in range(4)], labels,
        ProbeConfig(epochs=200),
    )
    assert report.top1 == 1.0


def test_linear_probe_refuses_leaked_ids(trained, rng):
    clouds = [rng.normal(size=(16, 3)) for _ in range(2)]
    split = (["c00_0000", "c01_0000"], clouds, ["cat00", "cat01"])
    with pytest.raises(SplitLeakage):
        linear_probe(trained, split, split, ["cat00", "cat01"], ProbeConfig(epochs=5))


def test_evaluate_tasks(trained, manifest):
    zs = evaluate("zeroshot", trained, manifest)
    assert [r.task for r in zs] == ["zeroshot"]
    assert zs[0].count == 3
    rt = evaluate("retrieval", trained, manifest, seed=4)
    assert [r.task for r in rt] == ["retrieval-2d3d", "retrieval-3d2d", "retrieval-mean"]
    assert rt[2].top1 == pytest.approx((rt[0].top1 + rt[1].top1) / 2)
    assert evaluate("retrieval", trained, manifest, seed=4)[0].topk == rt[0].topk
    lp = evaluate("linear-probe", trained, manifest, probe_cfg=ProbeConfig(epochs=50))
    assert 0.0 <= lp[0].top1 <= lp[0].top5 <= 1.0


def test_linear_probe_with_encoder_finetuning(trained, manifest):
    before = {k: v.copy() for k, v in trained.tensors.items()}
    report = evaluate(
        "linear-probe", trained, manifest, probe_cfg=ProbeConfig(epochs=5, finetune_encoder=True)
    )[0]
    assert report.count == 3
    for k, v in before.items():
        assert np.array_equal(trained.tensors[k], v)


def test_report_rows_have_header_width():
    r = MetricsReport("zeroshot", {1: 0.5, 5: 1.0}, 4, {"a": 0.5})
    assert all(len(row) == len(r.header()) for row in r.rows())


def test_ablation_rows(tmp_path, caplog):
    template = SynthConfig(
        categories=2, subtypes=2, per_category=5, views=2, feat_dim=8, landmarks=2, points=16, texture_dim=2, seed=3
    )
    cfg = small_train_config(batch_size=4, epochs=1)
    with caplog.at_level(logging.INFO):
        rows = ablate_landmarks(template, cfg, [2, 2, 3], seeds=1, workdir=tmp_path, probe_cfg=ProbeConfig(epochs=20))
    assert [r.L for r in rows] == [2, 3]
    assert len(rows[0].as_list()) == len(ABLATION_HEADER)
    assert all(0.0 <= v <= 1.0 for r in rows for v in r.as_list()[1:])
    assert any("去重" in rec.getMessage() for rec in caplog.records)
    # the fine-tuned column retrains the encoder alongside the linear head
    assert any("编码器微调" in rec.getMessage() for rec in caplog.records)
    assert (tmp_path / "L0003_seed0" / "data" / "manifest.json").exists()


def test_untrained_probe_is_chance_level(rng):
    labels = ["a", "b", "c"]
    x = rng.normal(size=(6, 4))
    y = [l for l in labels for _ in range(2)]
    report = linear_probe_embeddings(x, y, x, y, labels, ProbeConfig(epochs=0))
    # an all-zero head ties every class and picks the first
    assert report.top1 == pytest.approx(1 / 3)
    assert report.topk[5] == 1.0


def test_single_gallery_item_always_hits(rng):
    e = l2_normalize_rows(rng.normal(size=(1, 5)))
    assert cross_modal_retrieval(-e, e, np.array([0])).top1 == 1.0


def test_single_category_zero_shot_is_perfect(rng):
    prompt = l2_normalize_rows(rng.normal(size=(1, 8)))
    queries = l2_normalize_rows(rng.normal(size=(4, 8)))
    assert zero_shot_from_embeddings(queries, ["only"] * 4, ["only"], prompt).top1 == 1.0


def test_retrieval_matches_oracle_on_random_instances(rng):
    for _ in range(200):
        n_q, n_g, dim = (int(v) for v in rng.integers((1, 1, 2), (13, 13, 9)))
        q = l2_normalize_rows(rng.normal(size=(n_q, dim)))
        g = l2_normalize_rows(rng.normal(size=(n_g, dim)))
        gt = rng.integers(0, n_g, size=n_q)
        report = cross_modal_retrieval(q, g, gt, ks=(1, 5))
        assert report.topk == oracle_retrieval(q.tolist(), g.tolist(), gt.tolist(), ks=(1, 5))


def test_shuffled_labels_leave_the_head_at_chance():
    labels = ["a", "b", "c", "d"]
    top1 = []
    for seed in range(5):
        r = np.random.default_rng(seed)
        train_y = [str(c) for c in r.permutation([labels[i % 4] for i in range(80)])]
        test_y = [labels[i] for i in r.integers(0, 4, size=200)]
        report = linear_probe_embeddings(
            r.normal(size=(80, 6)), train_y, r.normal(size=(200, 6)), test_y, labels, ProbeConfig(epochs=50)
        )
        top1.append(report.top1)
    assert np.mean(top1) == pytest.approx(1 / len(labels), abs=0.08)
