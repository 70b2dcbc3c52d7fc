"""
Evaluation for WeakGround
=========================

Grounding accuracy on the test split in two proposal modes:

- detector: the stored detector proposals; a prediction is correct at
  threshold t when IoU(chosen box, target object box) > t (strict);
- gt: one noiseless proposal per object; correct when the chosen proposal
  is the target object.

The report also carries per-branch diagnostics, the max-score histogram of
both branches, and two dataset oracles (chance rate, category-only ceiling).
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from src.exceptions import DatasetError, ParseError
from src.file_manager import DatasetFileManager
from src.geometry import iou_3d
from src.grounder import CATEGORY_BRANCH, INSTANCE_BRANCH, Grounder, GroundingResult
from src.model import GroundingModel, QueryInput
from src.synthworld import CategoryVocab, Proposal, Scene

logger = logging.getLogger(__name__)

MODES = ("detector", "gt")
CSV_COLUMNS = ("scene_id", "query", "branch", "chosen_proposal", "iou", "correct25", "correct50")
THREADS_ENV = "WEAKGROUND_THREADS"


class EvalConfig(BaseModel):
    mode: str = "detector"
    thresholds: Tuple[float, float] = (0.25, 0.5)
    histogram_bins: int = Field(10, ge=1)
    chunk_size: int = Field(64, ge=1)


@dataclass
class EvalRecord:
    scene_id: str
    query: str
    branch: str
    chosen_proposal: int
    iou: float
    correct25: bool
    correct50: bool
    correct: bool
    category_correct: bool
    instance_correct: Optional[bool]
    max_p_c: float
    max_p_f: Optional[float]


@dataclass
class EvalReport:
    mode: str
    query_count: int
    acc_25: float
    acc_50: float
    acc: float
    branch_counts: Dict[str, int]
    branch_accuracy: Dict[str, Optional[float]]
    histogram: Dict[str, List]
    oracles: Dict[str, float]
    skipped_queries: int = 0
    category_separation: Optional[Dict[str, float]] = None
    records: List[EvalRecord] = field(default_factory=list)

    def summary(self) -> dict:
        data = asdict(self)
        data.pop("records")
        return data

    def summary_lines(self) -> List[str]:
        lines = [f"mode={self.mode} queries={self.query_count}"]
        if self.mode == "detector":
            lines.append(f"Acc@.25={self.acc_25:.4f} Acc@.50={self.acc_50:.4f}")
        else:
            lines.append(f"Acc={self.acc:.4f}")
        lines.append(f"branches category={self.branch_counts.get(CATEGORY_BRANCH, 0)} "
                     f"instance={self.branch_counts.get(INSTANCE_BRANCH, 0)}")
        lines.append(" ".join(f"{k}={v:.4f}" for k, v in sorted(self.oracles.items())))
        return lines


def eval_threads() -> int:
    """Evaluation parallelism from WEAKGROUND_THREADS (default 1)"""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring invalid {THREADS_ENV}={raw!r}")
        return 1


def _proposals_for(scene: Scene, mode: str) -> Sequence[Proposal]:
    return scene.gt_proposals if mode == "gt" else scene.proposals


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------


def category_only_ceiling(scenes: Sequence[Scene]) -> float:
    """Expected accuracy of a uniform pick among the target's same-category instances"""
    shares = []
    for scene in scenes:
        for query in scene.queries:
            if query.eval_target is None:
                continue
            category = scene.object_by_id(query.eval_target).category
            shares.append(1.0 / sum(1 for o in scene.objects if o.category == category))
    return float(np.mean(shares)) if shares else 0.0


def chance_rate(scenes: Sequence[Scene], mode: str = "gt") -> float:
    """Mean of 1/m over queries, m being the proposal count of the mode"""
    rates = [1.0 / len(_proposals_for(s, mode)) for s in scenes for _ in s.queries if _proposals_for(s, mode)]
    return float(np.mean(rates)) if rates else 0.0


def category_separation(model: GroundingModel, scenes: Sequence[Scene], vocab: CategoryVocab) -> Dict[str, float]:
    """
    Mean cosine similarity between per-category fused proposal centroids

    Returns:
        {"confusable": mean over confusable pairs, "other": mean over the rest}
    """
    sums: Dict[int, np.ndarray] = {}
    counts: Dict[int, int] = {}
    usable = [s for s in scenes if s.gt_proposals and s.queries]
    pairs = [(s.gt_proposals, QueryInput.from_text(s.queries[0].text, vocab.names)) for s in usable]
    categories = [{o.object_id: o.category for o in s.objects} for s in usable]
    for start in range(0, len(pairs), 64):
        chunk = pairs[start:start + 64]
        scene_categories = categories[start:start + 64]
        fused = model.forward(model.prepare(chunk))
        for i, (proposals, _) in enumerate(chunk):
            rows = fused.proposal_emb.data[i, :len(proposals)]
            rows = rows / np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
            for proposal, row in zip(proposals, rows):
                category = scene_categories[i][proposal.matched_object]
                sums[category] = sums.get(category, 0.0) + row
                counts[category] = counts.get(category, 0) + 1

    centroids = {c: sums[c] / counts[c] for c in sums}
    confusable = {tuple(sorted(p)) for p in vocab.confusable_pairs}
    values: Dict[str, List[float]] = {"confusable": [], "other": []}
    seen = sorted(centroids)
    for i, a in enumerate(seen):
        for b in seen[i + 1:]:
            cos = float(centroids[a] @ centroids[b] /
                        max(np.linalg.norm(centroids[a]) * np.linalg.norm(centroids[b]), 1e-12))
            values["confusable" if (a, b) in confusable else "other"].append(cos)
    return {k: float(np.mean(v)) if v else float("nan") for k, v in values.items()}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _record(scene: Scene, text: str, target: int, result: GroundingResult, proposals: Sequence[Proposal],
            mode: str, thresholds: Tuple[float, float]) -> EvalRecord:
    target_box = scene.object_by_id(target).box

    def hit(index: Optional[int]) -> Optional[bool]:
        if index is None:
            return None
        if mode == "gt":
            return proposals[index].matched_object == target
        return iou_3d(proposals[index].box, target_box) > thresholds[0]

    iou = iou_3d(proposals[result.proposal_index].box, target_box)
    return EvalRecord(
        scene.scene_id, text, result.branch, result.proposal_index, iou,
        iou > thresholds[0], iou > thresholds[1], bool(hit(result.proposal_index)),
        bool(hit(result.category_choice)), hit(result.instance_choice),
        result.max_category, result.max_instance,
    )


def aggregate(records: Sequence[EvalRecord], bins: int = 10) -> dict:
    """Report aggregates recomputed from per-query records"""
    n = len(records)
    branch_counts = {CATEGORY_BRANCH: 0, INSTANCE_BRANCH: 0}
    for r in records:
        branch_counts[r.branch] += 1
    instance = [r.instance_correct for r in records if r.instance_correct is not None]
    pc = [r.max_p_c for r in records]
    pf = [r.max_p_f for r in records if r.max_p_f is not None]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return {
        "query_count": n,
        "acc_25": sum(r.correct25 for r in records) / n if n else 0.0,
        "acc_50": sum(r.correct50 for r in records) / n if n else 0.0,
        "acc": sum(r.correct for r in records) / n if n else 0.0,
        "branch_counts": branch_counts,
        "branch_accuracy": {
            CATEGORY_BRANCH: sum(r.category_correct for r in records) / n if n else None,
            INSTANCE_BRANCH: sum(instance) / len(instance) if instance else None,
        },
        "histogram": {
            "edges": [float(e) for e in edges],
            "max_p_c": [int(c) for c in np.histogram(pc, edges)[0]],
            "max_p_f": [int(c) for c in np.histogram(pf, edges)[0]],
        },
    }


def evaluate_scenes(scenes: Sequence[Scene], grounder: Grounder, cfg: EvalConfig,
                    vocab: Optional[CategoryVocab] = None) -> EvalReport:
    """
    Evaluate a grounder on scenes loaded in full mode

    Queries that cannot be grounded are logged and counted, not fatal.
    """
    if cfg.mode not in MODES:
        raise DatasetError(f"unknown evaluation mode '{cfg.mode}', expected one of {MODES}")

    jobs = []
    for scene in scenes:
        proposals = _proposals_for(scene, cfg.mode)
        for query in scene.queries:
            if query.eval_target is None:
                raise DatasetError(f"scene {scene.scene_id} has no eval targets; load it in full mode")
            jobs.append((scene, query, proposals))

    chunks = [jobs[i:i + cfg.chunk_size] for i in range(0, len(jobs), cfg.chunk_size)]
    errors: List[str] = []

    def run(chunk) -> List[Optional[GroundingResult]]:
        try:
            return grounder.infer_many([(proposals, query.text) for _, query, proposals in chunk])
        except (ParseError, ValueError) as e:
            results = []
            for scene, query, proposals in chunk:
                try:
                    results.append(grounder.infer(proposals, query.text))
                except (ParseError, ValueError) as item_error:
                    errors.append(f"{scene.scene_id} '{query.text}': {item_error}")
                    results.append(None)
            return results

    threads = eval_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run, chunks))
    else:
        outputs = [run(chunk) for chunk in chunks]

    records = []
    for chunk, results in zip(chunks, outputs):
        for (scene, query, proposals), result in zip(chunk, results):
            if result is not None:
                records.append(_record(scene, query.text, query.eval_target, result, proposals,
                                       cfg.mode, cfg.thresholds))

    if errors:
        logger.warning(f"Skipped {len(errors)} queries during evaluation")
        for error in errors[:10]:
            logger.warning(f"  - {error}")

    stats = aggregate(records, cfg.histogram_bins)
    oracles = {"chance_rate": chance_rate(scenes, cfg.mode), "category_only_ceiling": category_only_ceiling(scenes)}
    report = EvalReport(cfg.mode, stats["query_count"], stats["acc_25"], stats["acc_50"], stats["acc"],
                        stats["branch_counts"], stats["branch_accuracy"], stats["histogram"], oracles,
                        len(errors), records=records)
    if vocab is not None and isinstance(grounder, Grounder):
        report.category_separation = category_separation(grounder.model, scenes, vocab)

    logger.info(f"Evaluation ({cfg.mode}): " + " | ".join(report.summary_lines()))
    logger.info(f"Branch max-score histogram: {stats['histogram']}")
    return report


def evaluate(data_path: Union[str, Path], checkpoint: Union[str, Path, GroundingModel],
             mode: str = "detector", cfg: Optional[EvalConfig] = None) -> EvalReport:
    """
    Evaluate a checkpoint on the test split of a dataset file

    Raises:
        CheckpointError: If the checkpoint cannot be read
        DatasetError: If the test split is empty
    """
    cfg = (cfg or EvalConfig()).model_copy(update={"mode": mode})
    model = checkpoint if isinstance(checkpoint, GroundingModel) else GroundingModel.load(checkpoint)
    scenes, vocab = DatasetFileManager().read_scenes(data_path, mode="full", split="test")
    if not scenes:
        raise DatasetError(f"dataset {data_path} has no test scenes")
    return evaluate_scenes(scenes, Grounder(model, cfg.chunk_size), cfg, vocab)


def write_report(report: EvalReport, path: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the JSON summary at path and the per-query CSV next to it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv") if path.suffix != ".csv" else path.with_name(path.stem + ".queries.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in report.records:
            writer.writerow([r.scene_id, r.query, r.branch, r.chosen_proposal, repr(float(r.iou)),
                             int(r.correct25), int(r.correct50)])
    logger.info(f"Report written to {path} and {csv_path}")
    return path, csv_path
