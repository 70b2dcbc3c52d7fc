"""
Component ablation for WeakGround
=================================

Trains and evaluates the four cumulative loss configurations, from category
matching alone to the full model, on one dataset and seed.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from src.evaluator import EvalConfig, evaluate
from src.model import ModelConfig
from src.trainer import TrainConfig, train

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = ("c1", "c2", "i1", "i2", "Acc@.25", "Acc@.50", "Acc")

# (use_category, use_negatives, use_phrase, use_relation), cumulative
ABLATION_ROWS = (
    (True, False, False, False),
    (True, True, False, False),
    (True, True, True, False),
    (True, True, True, True),
)


@dataclass
class AblationRow:
    flags: Dict[str, bool]
    acc_25: float
    acc_50: float
    acc: float
    loss_counters: Dict[str, int]

    def as_csv_row(self) -> List[str]:
        return [str(int(self.flags[k])) for k in ("c1", "c2", "i1", "i2")] + [
            f"{self.acc_25:.4f}", f"{self.acc_50:.4f}", f"{self.acc:.4f}"
        ]


def ablation_configs(base: TrainConfig) -> List[TrainConfig]:
    return [
        base.model_copy(update={"use_category": c1, "use_negatives": c2, "use_phrase": i1, "use_relation": i2})
        for c1, c2, i1, i2 in ABLATION_ROWS
    ]


def ablate(data_path: Union[str, Path], base: TrainConfig, model_cfg: Optional[ModelConfig] = None,
           eval_cfg: Optional[EvalConfig] = None, out_path: Optional[Union[str, Path]] = None) -> List[AblationRow]:
    """
    Train and evaluate every cumulative configuration

    Returns:
        One AblationRow per configuration, in ablation order
    """
    rows = []
    for index, cfg in enumerate(ablation_configs(base), start=1):
        logger.info(f"Ablation {index}/{len(ABLATION_ROWS)}: flags {cfg.flags}")
        model, result = train(data_path, cfg, model_cfg)
        detector = evaluate(data_path, model, "detector", eval_cfg)
        gt = evaluate(data_path, model, "gt", eval_cfg)
        rows.append(AblationRow(cfg.flags, detector.acc_25, detector.acc_50, gt.acc, result.loss_counters))
        logger.info(f"Ablation {index}: Acc@.25={detector.acc_25:.4f} Acc@.50={detector.acc_50:.4f} "
                    f"Acc={gt.acc:.4f}")

    if out_path is not None:
        write_ablation_table(rows, out_path)
    return rows


def write_ablation_table(rows: Sequence[AblationRow], path: Union[str, Path]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow(row.as_csv_row())
    logger.info(f"Ablation table written to {path}")
