"""
Textual digests of WeakGround artifacts
=======================================

`digest(path)` recognises every file the pipeline writes (training log,
per-query evaluation CSV, evaluation JSON, ablation table, dataset file and
its metadata sidecar) and returns a short human-readable summary.
"""

import csv
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Union

import numpy as np

from src.ablation import ABLATION_COLUMNS
from src.evaluator import CSV_COLUMNS
from src.exceptions import DatasetError
from src.trainer import LOG_COLUMNS

logger = logging.getLogger(__name__)


def _read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _float(value: str):
    return float(value) if value not in ("", None) else None


def training_log_digest(rows: Sequence[Dict[str, str]]) -> List[str]:
    if not rows:
        return ["training log: no epochs"]
    lines = [f"training log: {len(rows)} epochs"]
    totals = [(_float(r["total"]), int(r["epoch"])) for r in rows if _float(r["total"]) is not None]
    if totals:
        best, best_epoch = min(totals)
        lines.append(f"total: first={totals[0][0]:.6f} last={totals[-1][0]:.6f} best={best:.6f} (epoch {best_epoch})")
    last = rows[-1]
    parts = []
    for column in LOG_COLUMNS[1:-1]:
        value = _float(last[column])
        parts.append(f"{column}={'off' if value is None else f'{value:.6f}'}")
    lines.append("last epoch: " + " ".join(parts))
    return lines


def eval_records_digest(rows: Sequence[Dict[str, str]]) -> List[str]:
    if not rows:
        return ["evaluation records: no queries"]
    correct25 = np.mean([int(r["correct25"]) for r in rows])
    correct50 = np.mean([int(r["correct50"]) for r in rows])
    branches = Counter(r["branch"] for r in rows)
    mean_iou = np.mean([float(r["iou"]) for r in rows])
    scenes = len({r["scene_id"] for r in rows})
    return [
        f"evaluation records: {len(rows)} queries over {scenes} scenes",
        f"Acc@.25={correct25:.4f} Acc@.50={correct50:.4f} mean IoU={mean_iou:.4f}",
        "branches " + " ".join(f"{k}={v}" for k, v in sorted(branches.items())),
    ]


def ablation_digest(rows: Sequence[Dict[str, str]]) -> List[str]:
    lines = [f"ablation: {len(rows)} configurations"]
    for row in rows:
        enabled = "+".join(k for k in ("c1", "c2", "i1", "i2") if row[k] == "1") or "none"
        lines.append(f"{{{enabled}}}: Acc@.25={float(row['Acc@.25']):.4f} "
                     f"Acc@.50={float(row['Acc@.50']):.4f} Acc={float(row['Acc']):.4f}")
    return lines


def eval_summary_digest(data: dict) -> List[str]:
    lines = [f"evaluation: mode={data['mode']} queries={data['query_count']}"]
    if data["mode"] == "detector":
        lines.append(f"Acc@.25={data['acc_25']:.4f} Acc@.50={data['acc_50']:.4f}")
    else:
        lines.append(f"Acc={data['acc']:.4f}")
    branch_accuracy = " ".join(
        f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in sorted(data["branch_accuracy"].items())
    )
    lines.append(f"branch accuracy: {branch_accuracy}")
    lines.append("oracles: " + " ".join(f"{k}={v:.4f}" for k, v in sorted(data["oracles"].items())))
    if data.get("category_separation"):
        lines.append("category separation: " + " ".join(
            f"{k}={v:.4f}" for k, v in sorted(data["category_separation"].items())))
    if data.get("skipped_queries"):
        lines.append(f"skipped queries: {data['skipped_queries']}")
    return lines


def meta_digest(data: dict) -> List[str]:
    vocab = data["vocab"]
    pairs = ", ".join(f"{vocab['names'][a]}/{vocab['names'][b]}" for a, b in vocab["confusable_pairs"])
    return [
        f"dataset metadata: format v{data['format_version']} seed={data['seed']}",
        f"categories: {len(vocab['names'])} ({', '.join(vocab['names'])})",
        f"confusable pairs: {pairs or 'none'}",
    ]


def dataset_digest(path: Path) -> List[str]:
    scenes: Counter = Counter()
    queries: Counter = Counter()
    proposals: List[int] = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            scenes[record["split"]] += 1
            queries[record["split"]] += len(record["queries"])
            proposals.append(len(record["proposals"]))
    lines = [f"dataset: {sum(scenes.values())} scenes, {sum(queries.values())} queries"]
    for split in sorted(scenes):
        lines.append(f"{split}: {scenes[split]} scenes, {queries[split]} queries")
    if proposals:
        lines.append(f"proposals per scene: mean={np.mean(proposals):.2f} min={min(proposals)} max={max(proposals)}")
    return lines


_CSV_DIGESTS: Dict[tuple, Callable[[Sequence[Dict[str, str]]], List[str]]] = {
    tuple(LOG_COLUMNS): training_log_digest,
    tuple(CSV_COLUMNS): eval_records_digest,
    tuple(ABLATION_COLUMNS): ablation_digest,
}


def digest(path: Union[str, Path]) -> List[str]:
    """
    Human-readable digest of a pipeline artifact

    Raises:
        DatasetError: If the file is missing or is not a recognised artifact
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"no such file: {path}")

    if path.suffix == ".csv":
        with open(path, "r", encoding="utf-8", newline="") as f:
            header = tuple(next(csv.reader(f), ()))
        handler = _CSV_DIGESTS.get(header)
        if handler is None:
            raise DatasetError(f"unrecognised CSV header in {path}: {','.join(header)}")
        return handler(_read_csv(path))

    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError:
        data = None
    except UnicodeDecodeError as e:
        raise DatasetError(f"{path} is not a text artifact") from e

    if isinstance(data, dict) and "format_version" in data and "vocab" in data:
        return meta_digest(data)
    if isinstance(data, dict) and {"mode", "query_count", "oracles"} <= set(data):
        return eval_summary_digest(data)
    try:
        return dataset_digest(path)
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"{path} is not a recognised artifact") from e
