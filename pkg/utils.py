import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logger(level: str = "INFO", log_dir: str | None = "logs") -> logging.Logger:
    logger = logging.getLogger()
    logger.setLevel(level)
    fmt = logging.Formatter(LOG_FORMAT)

    # 重复调用时不叠加 handler
    for handler in list(logger.handlers):
        if getattr(handler, "_hn3d", False):
            logger.removeHandler(handler)
            handler.close()

    # Console handler
    ch = logging.StreamHandler()
    ch.setFormatter(fmt)
    ch._hn3d = True  # type: ignore[attr-defined]
    logger.addHandler(ch)

    # File handler
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        fh = logging.FileHandler(os.path.join(log_dir, "hn3d.log"), encoding="utf-8")
        fh.setFormatter(fmt)
        fh._hn3d = True  # type: ignore[attr-defined]
        logger.addHandler(fh)

    return logger


def sha256_file(path: str | Path, chunk: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            block = f.read(chunk)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def write_json(path: str | Path, data: Any) -> None:
    """Write JSON deterministically (sorted keys, fixed indent, trailing newline)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable[Any]]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow(list(row))


def format_table(header: list[str], rows: list[list[Any]]) -> str:
    """Render rows as an aligned plain-text table."""
    cells = [[str(h) for h in header]] + [
        [f"{v:.4f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
