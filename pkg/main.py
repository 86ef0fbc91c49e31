import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Callable

from config import LOSS_MODES, ProbeConfig, SynthConfig, TrainConfig, load_config
from datamodel import (
    load_landmarks,
    load_manifest,
    load_object_cloud,
    load_views,
    require_valid,
    validate_dataset,
)
from encoder import load_checkpoint
from errors import ConfigInvalid, DataError, Hn3dError, MissingLandmarks, UsageError
from evaluation import ABLATION_GRID, ABLATION_HEADER, ablate_landmarks, evaluate
from similarity import ViewSet, build_descriptors, chamfer_distance, emd, i2i_similarity, i2l2_similarity, rank_by_score
from simstore import DEFAULT_ALPHA, STORE_KINDS, load_store, precompute, save_store
from synthdata import generate
from trainer import TrainRun, train
from utils import format_table, read_json, setup_logger, write_csv, write_json

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


def _int_list(raw: str) -> list[int]:
    try:
        return [int(x) for x in str(raw).split(",") if x.strip()]
    except ValueError as e:
        raise UsageError(f"expected comma separated integers, got {raw!r}") from e


# 每个子命令的默认值；配置文件覆盖默认值，命令行参数覆盖配置文件
DEFAULTS: dict[str, dict[str, Any]] = {
    "gen-synthetic": {
        "categories": 8, "per_cat": 25, "subtypes": 4, "views": 6, "feat": 64, "landmarks": 16,
        "points": 256, "texture_dim": 8, "test_fraction": 0.2, "seed": 0, "out": None,
    },
    "precompute": {"data": None, "sim": None, "alpha": DEFAULT_ALPHA, "landmarks_from_manifest": False,
                   "out": None, "threads": None},
    "train": {
        "data": None, "mode": None, "simstore": None, "simstore2": None, "batch": 64, "epochs": 30,
        "lr": 1e-2, "warmup_frac": 0.1, "weight_decay": 0.01, "tau": 0.07, "hidden1": 64, "hidden2": 128,
        "seed": 0, "out": None, "threads": 1,
    },
    "eval": {
        "task": None, "ckpt": None, "data": None, "topk": "1,5", "seed": 0, "out": None, "split": "test",
        "probe_epochs": 300, "probe_lr": 0.5, "finetune": False, "threads": 1,
    },
    "ablate-landmarks": {
        "data_template": None, "grid": ",".join(str(x) for x in ABLATION_GRID), "seeds": 3, "epochs": 30,
        "batch": 64, "lr": 1e-2, "seed": 0, "probe_epochs": 100, "out": None, "workdir": None, "threads": None,
    },
    "sim-rank": {"data": None, "query_id": None, "sim": None, "topk": 5, "alpha": DEFAULT_ALPHA,
                 "scope": "category", "out": None},
    "validate": {"data": None},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hn3d", description="Hard-negative 2D/3D contrastive alignment pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", help="JSON file with defaults for this command")
        return p

    p = cmd("gen-synthetic", "generate a synthetic dataset")
    for flag, typ in [("--categories", int), ("--per-cat", int), ("--subtypes", int), ("--views", int),
                      ("--feat", int), ("--landmarks", int), ("--points", int), ("--texture-dim", int),
                      ("--test-fraction", float), ("--seed", int), ("--out", str)]:
        p.add_argument(flag, type=typ)

    p = cmd("precompute", "precompute per-category 3D similarities")
    p.add_argument("--data")
    p.add_argument("--sim", choices=STORE_KINDS)
    p.add_argument("--alpha", type=float)
    p.add_argument("--landmarks-from-manifest", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)

    p = cmd("train", "train the point encoder")
    p.add_argument("--data")
    p.add_argument("--mode", choices=LOSS_MODES)
    p.add_argument("--simstore")
    p.add_argument("--simstore2")
    for flag, typ in [("--batch", int), ("--epochs", int), ("--lr", float), ("--warmup-frac", float),
                      ("--weight-decay", float), ("--tau", float), ("--hidden1", int), ("--hidden2", int),
                      ("--seed", int), ("--threads", int)]:
        p.add_argument(flag, type=typ)
    p.add_argument("--out")

    p = cmd("eval", "evaluate a checkpoint")
    p.add_argument("task", choices=("zeroshot", "retrieval", "linear-probe"))
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--topk")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--probe-epochs", type=int)
    p.add_argument("--probe-lr", type=float)
    p.add_argument("--finetune", action="store_true", default=None)
    p.add_argument("--threads", type=int)

    p = cmd("ablate-landmarks", "landmark-count ablation on synthetic data")
    p.add_argument("--data-template", help="JSON synthetic-data config")
    p.add_argument("--grid")
    for flag, typ in [("--seeds", int), ("--epochs", int), ("--batch", int), ("--lr", float), ("--seed", int),
                      ("--probe-epochs", int), ("--threads", int)]:
        p.add_argument(flag, type=typ)
    p.add_argument("--out")
    p.add_argument("--workdir")

    p = cmd("sim-rank", "rank objects by 3D similarity to a query")
    p.add_argument("--data")
    p.add_argument("--query-id")
    p.add_argument("--sim", choices=("i2i", "i2l2", "avg", "chamfer", "emd"))
    p.add_argument("--topk", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--scope", choices=("category", "all"))
    p.add_argument("--out")

    p = cmd("validate", "check a dataset against its manifest")
    p.add_argument("--data")
    return parser


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then the JSON config file, then explicit flags."""
    command = args.command
    resolved = dict(DEFAULTS[command])
    if args.config:
        try:
            from_file = read_json(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config file {args.config}: {e}") from e
        if from_file.pop("command", command) != command:
            raise UsageError(f"config file {args.config} is for another command")
        unknown = sorted(set(from_file) - set(resolved))
        if unknown:
            raise UsageError(f"unknown keys in config file: {unknown}")
        resolved.update(from_file)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        resolved[key] = value
    return resolved


def _require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required options: " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _threads(cfg: dict[str, Any], default: int) -> int:
    return int(cfg["threads"]) if cfg.get("threads") else default


def cmd_gen_synthetic(cfg: dict[str, Any], env) -> Path:
    _require(cfg, "out")
    synth = SynthConfig(
        categories=cfg["categories"], subtypes=cfg["subtypes"], per_category=cfg["per_cat"], views=cfg["views"],
        feat_dim=cfg["feat"], landmarks=cfg["landmarks"], points=cfg["points"], texture_dim=cfg["texture_dim"],
        test_fraction=cfg["test_fraction"], seed=cfg["seed"],
    )
    generate(synth, cfg["out"])
    return Path(cfg["out"])


def cmd_precompute(cfg: dict[str, Any], env) -> Path:
    _require(cfg, "data", "sim", "out")
    manifest = load_manifest(cfg["data"])
    require_valid(manifest)
    landmarks = load_landmarks(manifest) if cfg["landmarks_from_manifest"] else None
    store = precompute(manifest, cfg["sim"], landmarks, float(cfg["alpha"]), _threads(cfg, env.threads))
    save_store(store, cfg["out"])
    return Path(cfg["out"])


def cmd_train(cfg: dict[str, Any], env) -> Path:
    _require(cfg, "data", "mode", "out")
    mode = cfg["mode"]
    if mode == "hn-avg" and not (cfg["simstore"] and cfg["simstore2"]):
        raise UsageError("--mode hn-avg needs both --simstore and --simstore2 (one i2i, one i2l2)")
    if mode in ("hn-i2i", "hn-i2l2") and not cfg["simstore"]:
        raise UsageError(f"--mode {mode} needs --simstore")

    manifest = load_manifest(cfg["data"])
    require_valid(manifest)
    stores = {}
    if mode != "plain":
        for path in (cfg["simstore"], cfg["simstore2"]):
            if path:
                store = load_store(path, manifest)
                if store.kind in stores:
                    raise UsageError(f"two {store.kind} simstores given; hn-avg needs one i2i and one i2l2")
                stores[store.kind] = store

    train_cfg = TrainConfig(
        mode=mode, batch_size=cfg["batch"], epochs=cfg["epochs"], base_lr=cfg["lr"],
        warmup_frac=cfg["warmup_frac"], weight_decay=cfg["weight_decay"], tau_init=cfg["tau"],
        hidden1=cfg["hidden1"], hidden2=cfg["hidden2"], seed=cfg["seed"], threads=_threads(cfg, 1),
    )
    train(TrainRun(train_cfg, manifest, Path(cfg["out"]), stores))
    return Path(cfg["out"])


def cmd_eval(cfg: dict[str, Any], env) -> Path:
    _require(cfg, "task", "ckpt", "data", "out")
    manifest = load_manifest(cfg["data"])
    require_valid(manifest)
    ckpt = load_checkpoint(cfg["ckpt"])
    if ckpt.params.feat_dim != manifest.feat_dim:
        raise ConfigInvalid(f"checkpoint feat_dim {ckpt.params.feat_dim} != dataset feat_dim {manifest.feat_dim}")
    probe = ProbeConfig(epochs=cfg["probe_epochs"], lr=cfg["probe_lr"], finetune_encoder=bool(cfg["finetune"]))
    reports = evaluate(
        cfg["task"], ckpt.params, manifest, _int_list(cfg["topk"]), cfg["seed"], cfg["split"], probe,
        _threads(cfg, 1),
    )
    rows = [row for r in reports for row in r.rows()]
    header = reports[0].header()
    write_csv(cfg["out"], header, rows)
    logger.info("评估结果:\n%s", format_table(header, rows))
    return Path(cfg["out"]).parent


def cmd_ablate(cfg: dict[str, Any], env) -> Path:
    _require(cfg, "out")
    template = SynthConfig.from_dict(read_json(cfg["data_template"])) if cfg["data_template"] else SynthConfig()
    out = Path(cfg["out"])
    workdir = Path(cfg["workdir"]) if cfg["workdir"] else out.parent / "ablation_runs"
    train_cfg = TrainConfig(mode="hn-i2l2", batch_size=cfg["batch"], epochs=cfg["epochs"], base_lr=cfg["lr"],
                            seed=cfg["seed"])
    probe = ProbeConfig(epochs=cfg["probe_epochs"])
    rows = ablate_landmarks(template, train_cfg, _int_list(cfg["grid"]), int(cfg["seeds"]), workdir, probe,
                            threads=_threads(cfg, env.threads))
    table = [r.as_list() for r in rows]
    write_csv(out, ABLATION_HEADER, table)
    text = format_table(ABLATION_HEADER, table)
    out.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
    logger.info("消融结果:\n%s", text)
    return out.parent


def cmd_sim_rank(cfg: dict[str, Any], env) -> Path | None:
    _require(cfg, "data", "query_id", "sim")
    kind, scope = cfg["sim"], cfg["scope"]
    if kind in ("i2l2", "avg") and scope != "category":
        raise UsageError(f"--sim {kind} is only defined within a category (use --scope category)")
    manifest = load_manifest(cfg["data"])
    require_valid(manifest)
    query = manifest.object(cfg["query_id"])
    candidates = [o for o in manifest.objects if scope == "all" or o.category == query.category]
    by_id = {o.id: o for o in candidates}
    by_id[query.id] = query

    views = {oid: ViewSet(oid, o.category, load_views(manifest, o)) for oid, o in by_id.items()}
    landmarks = load_landmarks(manifest) if kind in ("i2l2", "avg") else {}
    if kind in ("i2l2", "avg") and query.category not in landmarks:
        raise MissingLandmarks(f"category {query.category!r} has no landmarks")

    def descriptors(oid: str):
        return build_descriptors(views[oid], landmarks[query.category])

    scorers: dict[str, tuple[Callable[[str, str], float], bool]] = {
        "i2i": (lambda a, b: i2i_similarity(views[a], views[b]), True),
        "i2l2": (lambda a, b: i2l2_similarity(descriptors(a), descriptors(b)), True),
        "avg": (lambda a, b: 0.5 * (i2i_similarity(views[a], views[b]) + i2l2_similarity(descriptors(a), descriptors(b))), True),
        "chamfer": (lambda a, b: chamfer_distance(load_object_cloud(manifest, by_id[a]), load_object_cloud(manifest, by_id[b])), False),
        "emd": (lambda a, b: emd(load_object_cloud(manifest, by_id[a]), load_object_cloud(manifest, by_id[b])), False),
    }
    score, higher = scorers[kind]
    ranking = rank_by_score(query.id, [o.id for o in candidates], score, higher)[: int(cfg["topk"])]
    rows = [[n + 1, oid, by_id[oid].category, value] for n, (oid, value) in enumerate(ranking)]
    header = ["rank", "object_id", "category", "distance" if not higher else "similarity"]
    logger.info("查询 %s (%s) 的 %s 排序:\n%s", query.id, query.category, kind, format_table(header, rows))
    if cfg["out"]:
        write_csv(cfg["out"], header, rows)
        return Path(cfg["out"]).parent
    return None


def cmd_validate(cfg: dict[str, Any], env) -> None:
    _require(cfg, "data")
    report = validate_dataset(load_manifest(cfg["data"]))
    for v in report.violations:
        logger.error("校验失败 %s: %s", v.object_id, v.message)
    if not report.ok:
        raise DataError(f"{len(report.violations)} violations in {report.checked} objects")
    return None


COMMANDS: dict[str, Callable[[dict[str, Any], Any], Path | None]] = {
    "gen-synthetic": cmd_gen_synthetic,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-landmarks": cmd_ablate,
    "sim-rank": cmd_sim_rank,
    "validate": cmd_validate,
}


def main(argv: list[str] | None = None) -> int:
    env = load_config()
    setup_logger(level=env.log_level, log_dir=env.log_dir if env.log_file else None)

    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logger.info("命令 %s，解析后的配置: %s", args.command, json.dumps(cfg, sort_keys=True))
        out_dir = COMMANDS[args.command](cfg, env)
        if out_dir is not None:
            write_json(Path(out_dir) / RESOLVED_CONFIG, {"command": args.command, **cfg})
        return 0
    except Hn3dError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except SystemExit as e:
        # argparse --help
        return int(e.code or 0)
    except Exception as e:
        logger.exception("运行失败: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
