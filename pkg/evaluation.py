"""Zero-shot classification, linear probing, cross-modal retrieval and the landmark ablation.

Every ranking breaks ties by ascending index (stable sort on negated scores),
so top-k numbers are reproducible even on degenerate inputs.
"""
from dataclasses import dataclass, field
import logging
from pathlib import Path
import statistics

import numpy as np
from numpy.typing import NDArray

from config import ProbeConfig, SynthConfig, TrainConfig
from datamodel import DatasetManifest, load_landmarks, load_manifest, load_object_cloud, load_prompt_embeddings, load_views
from encoder import AdamState, EncoderParams, adamw_step, backward_many, encode_many
from errors import CategorySetMismatch, ConfigInvalid, MissingGroundTruth, SplitLeakage
from numkit import RngStream
from simstore import precompute
from synthdata import generate
from trainer import TrainRun, train

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5)
ABLATION_GRID = (32, 64, 128, 256, 512)
ABLATION_HEADER = ["L", "zero_shot", "fine_tuned", "retrieval"]
STREAM_EVAL_VIEWS = 11


@dataclass
class MetricsReport:
    task: str
    topk: dict[int, float]
    count: int
    per_category: dict[str, float] = field(default_factory=dict)

    @property
    def top1(self) -> float:
        return self.topk[1]

    @property
    def top5(self) -> float | None:
        return self.topk.get(5)

    def rows(self) -> list[list]:
        """CSV rows: one overall row, then one per category (top-1 only)."""
        ks = sorted(self.topk)
        out = [[self.task, "all", self.count] + [self.topk[k] for k in ks]]
        for cat, acc in self.per_category.items():
            out.append([self.task, cat, "", acc] + [""] * (len(ks) - 1))
        return out

    def header(self) -> list[str]:
        return ["task", "category", "count"] + [f"top{k}" for k in sorted(self.topk)]


def target_ranks(scores: NDArray, targets: NDArray) -> NDArray[np.int64]:
    """0-based rank of each row's target under descending score, ties by ascending index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.argmax(order == np.asarray(targets)[:, None], axis=1)


def _report(task: str, ranks: NDArray, ks, labels: list[str] | None) -> MetricsReport:
    ks = sorted(set(int(k) for k in ks) | {1})
    topk = {k: float(np.mean(ranks < k)) for k in ks}
    per_cat: dict[str, float] = {}
    if labels is not None:
        labels_arr = np.asarray(labels)
        for cat in dict.fromkeys(labels):
            per_cat[cat] = float(np.mean(ranks[labels_arr == cat] < 1))
    return MetricsReport(task, topk, int(len(ranks)), per_cat)


def zero_shot_from_embeddings(
    e_shape: NDArray, labels: list[str], category_names: list[str], prompts: NDArray, ks=DEFAULT_KS
) -> MetricsReport:
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.shape[0] != len(category_names):
        raise CategorySetMismatch(f"{prompts.shape[0]} prompt embeddings for {len(category_names)} categories")
    index = {c: i for i, c in enumerate(category_names)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise CategorySetMismatch(f"labels without a prompt embedding: {unknown}")
    scores = np.asarray(e_shape, dtype=np.float64) @ prompts.T
    targets = np.array([index[label] for label in labels])
    return _report("zeroshot", target_ranks(scores, targets), ks, labels)


def zero_shot_classify(
    params: EncoderParams,
    clouds: list[NDArray],
    labels: list[str],
    category_names: list[str],
    prompts: NDArray,
    ks=DEFAULT_KS,
    threads: int = 1,
) -> MetricsReport:
    """Predict the category whose prompt embedding is closest to the shape embedding."""
    e_shape, _ = encode_many(params, clouds, threads)
    return zero_shot_from_embeddings(e_shape, labels, category_names, prompts, ks)


def _softmax_rows(x: NDArray) -> NDArray:
    shifted = x - x.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _head_grads(x: NDArray, y: NDArray, w: NDArray, b: NDArray, weight_decay: float):
    n = x.shape[0]
    probs = _softmax_rows(x @ w + b)
    g = probs
    g[np.arange(n), y] -= 1.0
    g /= n
    return x.T @ g + weight_decay * w, g.sum(axis=0), g @ w.T


def train_linear_head(x: NDArray, y: NDArray, num_classes: int, cfg: ProbeConfig) -> tuple[NDArray, NDArray]:
    """Full-batch softmax regression from a zero init (plain gradient descent)."""
    w = np.zeros((x.shape[1], num_classes))
    b = np.zeros(num_classes)
    for _ in range(cfg.epochs):
        dw, db, _ = _head_grads(x, y, w, b, cfg.weight_decay)
        w -= cfg.lr * dw
        b -= cfg.lr * db
    return w, b


def linear_probe_embeddings(
    train_x: NDArray,
    train_labels: list[str],
    test_x: NDArray,
    test_labels: list[str],
    category_names: list[str],
    cfg: ProbeConfig,
    ks=DEFAULT_KS,
) -> MetricsReport:
    if len(category_names) < 2:
        raise ConfigInvalid("linear probe needs at least 2 categories")
    index = {c: i for i, c in enumerate(category_names)}
    unknown = sorted((set(train_labels) | set(test_labels)) - set(index))
    if unknown:
        raise CategorySetMismatch(f"labels outside the category set: {unknown}")
    y_train = np.array([index[c] for c in train_labels])
    y_test = np.array([index[c] for c in test_labels])
    w, b = train_linear_head(np.asarray(train_x, dtype=np.float64), y_train, len(category_names), cfg)
    scores = np.asarray(test_x, dtype=np.float64) @ w + b
    return _report("linear-probe", target_ranks(scores, y_test), ks, list(test_labels))


def linear_probe(
    params: EncoderParams,
    train: tuple[list[str], list[NDArray], list[str]],
    test: tuple[list[str], list[NDArray], list[str]],
    category_names: list[str],
    cfg: ProbeConfig,
    ks=DEFAULT_KS,
    threads: int = 1,
) -> MetricsReport:
    """Linear head on encoder embeddings. ``train``/``test`` are (ids, clouds, labels)."""
    cfg.validate()
    leaked = sorted(set(train[0]) & set(test[0]))
    if leaked:
        raise SplitLeakage(f"{len(leaked)} object ids in both splits, e.g. {leaked[0]}")

    if cfg.finetune_encoder:
        params = _finetune_encoder(params, train, category_names, cfg, threads)
    train_x, _ = encode_many(params, train[1], threads)
    test_x, _ = encode_many(params, test[1], threads)
    return linear_probe_embeddings(train_x, train[2], test_x, test[2], category_names, cfg, ks)


def _finetune_encoder(params: EncoderParams, train, category_names: list[str], cfg: ProbeConfig, threads: int):
    index = {c: i for i, c in enumerate(category_names)}
    y = np.array([index[c] for c in train[2]])
    w = np.zeros((params.feat_dim, len(category_names)))
    b = np.zeros(len(category_names))
    state = AdamState.zeros_like(params)
    for step in range(1, cfg.epochs + 1):
        x, caches = encode_many(params, train[1], threads)
        dw, db, dx = _head_grads(x, y, w, b, cfg.weight_decay)
        grads = backward_many(params, caches, dx)
        params, state = adamw_step(params, grads, state, step, cfg.encoder_lr, 0.0)
        w -= cfg.lr * dw
        b -= cfg.lr * db
    logger.info("linear probe：编码器微调 %d 步完成", cfg.epochs)
    return params


def cross_modal_retrieval(
    queries: NDArray, gallery: NDArray, ground_truth: NDArray, ks=DEFAULT_KS, labels: list[str] | None = None,
    task: str = "retrieval",
) -> MetricsReport:
    """Rank the gallery by cosine for every query; hit@k iff the paired item is in the first k."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    gt = np.asarray(ground_truth)
    if gt.shape != (queries.shape[0],) or np.any(gt < 0) or np.any(gt >= gallery.shape[0]):
        raise MissingGroundTruth("every query needs exactly one ground-truth gallery index")
    scores = queries @ gallery.T
    return _report(task, target_ranks(scores, gt), ks, labels)


def bidirectional_retrieval(
    e_img: NDArray, e_shape: NDArray, ks=DEFAULT_KS, labels: list[str] | None = None
) -> tuple[MetricsReport, MetricsReport, dict[int, float]]:
    """2D->3D and 3D->2D retrieval under identity pairing, plus their mean top-k."""
    gt = np.arange(len(e_img))
    fwd = cross_modal_retrieval(e_img, e_shape, gt, ks, labels, task="retrieval-2d3d")
    bwd = cross_modal_retrieval(e_shape, e_img, gt, ks, labels, task="retrieval-3d2d")
    mean = {k: (fwd.topk[k] + bwd.topk[k]) / 2.0 for k in fwd.topk}
    return fwd, bwd, mean


@dataclass
class EvalSplit:
    ids: list[str]
    labels: list[str]
    clouds: list[NDArray]
    views: list[NDArray]


def load_split(manifest: DatasetManifest, split: str | None) -> EvalSplit:
    if split is not None and not manifest.declares_splits:
        logger.warning("manifest 未标注 train/test 划分，split=%s 使用全部 %d 个对象", split, len(manifest.objects))
    objs = manifest.split_objects(split)
    if not objs:
        raise ConfigInvalid(f"split {split!r} has no objects")
    return EvalSplit(
        ids=[o.id for o in objs],
        labels=[o.category for o in objs],
        clouds=[load_object_cloud(manifest, o) for o in objs],
        views=[load_views(manifest, o) for o in objs],
    )


def pick_views(views: list[NDArray], seed: int) -> NDArray:
    """One seeded view per object: the image side of the retrieval pairing."""
    rng = RngStream(seed, STREAM_EVAL_VIEWS)
    return np.stack([v[int(rng.integers(0, v.shape[0]))] for v in views])


def evaluate(
    task: str,
    params: EncoderParams,
    manifest: DatasetManifest,
    ks=DEFAULT_KS,
    seed: int = 0,
    split: str | None = "test",
    probe_cfg: ProbeConfig | None = None,
    threads: int = 1,
) -> list[MetricsReport]:
    """Run one evaluation task on a manifest split."""
    if task == "linear-probe" and not manifest.declares_splits:
        raise ConfigInvalid("linear probe needs a manifest with train/test splits")
    data = load_split(manifest, split)
    if task == "zeroshot":
        names, prompts = load_prompt_embeddings(manifest)
        return [zero_shot_classify(params, data.clouds, data.labels, names, prompts, ks, threads)]
    if task == "retrieval":
        e_shape, _ = encode_many(params, data.clouds, threads)
        fwd, bwd, mean = bidirectional_retrieval(pick_views(data.views, seed), e_shape, ks, data.labels)
        return [fwd, bwd, MetricsReport("retrieval-mean", mean, fwd.count)]
    if task == "linear-probe":
        train = load_split(manifest, "train")
        cfg = probe_cfg or ProbeConfig()
        report = linear_probe(
            params, (train.ids, train.clouds, train.labels), (data.ids, data.clouds, data.labels),
            manifest.category_ids, cfg, ks, threads,
        )
        return [report]
    raise ConfigInvalid(f"unknown evaluation task {task!r}")


@dataclass
class AblationRow:
    L: int
    zero_shot: float
    fine_tuned: float
    retrieval: float

    def as_list(self) -> list:
        return [self.L, self.zero_shot, self.fine_tuned, self.retrieval]


def dedupe_grid(grid) -> list[int]:
    values = [int(v) for v in grid]
    unique = list(dict.fromkeys(values))
    if len(unique) != len(values):
        logger.warning("L 网格存在重复值，已去重：%s -> %s", values, unique)
    return unique


def ablate_landmarks(
    template: SynthConfig,
    train_cfg: TrainConfig,
    grid=ABLATION_GRID,
    seeds: int = 3,
    workdir: str | Path = "ablation",
    probe_cfg: ProbeConfig | None = None,
    threads: int = 1,
) -> list[AblationRow]:
    """Regenerate, re-precompute (I2L)^2, retrain and evaluate for every L.

    The feature dimension is fixed across rows to hold the largest landmark set.
    """
    values = dedupe_grid(grid)
    feat_dim = max(template.feat_dim, max(values) + template.texture_dim)
    if feat_dim != template.feat_dim:
        logger.info("消融：feat_dim 由 %d 提升到 %d 以容纳 L=%d", template.feat_dim, feat_dim, max(values))
    probe_cfg = (probe_cfg or ProbeConfig()).replace(finetune_encoder=True)
    work = Path(workdir)
    rows: list[AblationRow] = []

    for L in values:
        zs, ft, rt = [], [], []
        for seed in range(seeds):
            run_dir = work / f"L{L:04d}_seed{seed}"
            cfg = template.replace(landmarks=L, feat_dim=feat_dim, seed=template.seed + seed)
            generate(cfg, run_dir / "data")
            manifest = load_manifest(run_dir / "data")
            store = precompute(manifest, "i2l2", load_landmarks(manifest), threads=threads)
            tcfg = train_cfg.replace(mode="hn-i2l2", seed=train_cfg.seed + seed)
            result = train(TrainRun(tcfg, manifest, run_dir / "train", {"i2l2": store}))
            params = result.params
            zs.append(evaluate("zeroshot", params, manifest, seed=seed, threads=threads)[0].top1)
            ft.append(evaluate("linear-probe", params, manifest, seed=seed, probe_cfg=probe_cfg, threads=threads)[0].top1)
            rt.append(evaluate("retrieval", params, manifest, seed=seed, threads=threads)[2].top1)
        row = AblationRow(L, statistics.median(zs), statistics.median(ft), statistics.median(rt))
        logger.info("消融 L=%d：zero-shot=%.4f, fine-tuned=%.4f, retrieval=%.4f", L, row.zero_shot, row.fine_tuned, row.retrieval)
        rows.append(row)
    return rows
